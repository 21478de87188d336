// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <set>

#include "repiln/random.hpp"
#include "repiln/tssa.hpp"
#include "oracles.hpp"

using namespace repiln;

namespace {

const double kS = masked_sentinel<double>();

Tensor<double> mask(const Tensor<double>& s, double e) {
  Tape<double> tape(false);
  return max_e_mask(tape.constant(s), e).value();
}

// Point conv = identity matrix, depthwise = Dirac.
TssaParams<double> passthrough(std::size_t C) {
  Rng rng(0);
  auto p = TssaParams<double>::init(C, 100, 1.0, rng);
  for (auto* pd : {&p.q, &p.k, &p.v}) {
    pd->point.w.value.fill(0);
    pd->point.b.value.fill(0);
    pd->depth.w.value.fill(0);
    pd->depth.b.value.fill(0);
    for (std::size_t c = 0; c < C; ++c) {
      pd->point.w.value.at(c, c, 0) = 1;
      pd->depth.w.value.at(c, 0, 1) = 1;
    }
  }
  return p;
}

}  // namespace

TEST_CASE("retained count rule") {
  CHECK(retained_count(50, 4) == 2);
  CHECK(retained_count(25, 4) == 1);
  CHECK(retained_count(1, 8) == 1);
  CHECK(retained_count(100, 200) == 200);
  CHECK(retained_count(10, 200) == 20);
  CHECK(retained_count(75, 32) == 24);
  CHECK(retained_count(10, 8) == 1);
  CHECK(retained_count(33, 3) == 1);
  for (double e : {0.5, 10.0, 12.5, 33.3, 50.0, 99.9, 100.0})
    for (std::size_t L : {1, 2, 3, 7, 8, 32, 200}) CHECK(retained_count(e, L) == oracle::keep_count(e, L));
  CHECK_THROWS(retained_count(0, 4));
  CHECK_THROWS(retained_count(101, 4));
}

TEST_CASE("max-e mask worked examples") {
  auto a = mask(Tensor<double>::matrix({{1, 3, 2, 0}}), 50);
  CHECK(a == Tensor<double>::matrix({{kS, 3, 2, kS}}));
  auto b = mask(Tensor<double>::matrix({{5, 5, 1, 1}}), 25);
  CHECK(b == Tensor<double>::matrix({{5, kS, kS, kS}}));
  Rng rng(1);
  auto s = normal_tensor<double>({5, 5}, 1.0, rng);
  CHECK(mask(s, 100) == s);
}

TEST_CASE("max-e mask matches sort-and-threshold oracle with nested supports") {
  Rng rng(17);
  for (std::size_t L : {3, 8, 13, 32}) {
    auto s = normal_tensor<double>({L, L}, 1.0, rng);
    // inject ties
    s.at(0, 1) = s.at(0, 2);
    std::vector<std::vector<double>> rows(L, std::vector<double>(L));
    for (std::size_t i = 0; i < L; ++i)
      for (std::size_t j = 0; j < L; ++j) rows[i][j] = s.at(i, j);
    std::vector<std::set<std::size_t>> prev;
    for (double e : {10.0, 25.0, 50.0, 75.0, 100.0}) {
      auto m = mask(s, e);
      auto keep = oracle::topk_keep(rows, oracle::keep_count(e, L));
      std::vector<std::set<std::size_t>> support(L);
      for (std::size_t i = 0; i < L; ++i)
        for (std::size_t j = 0; j < L; ++j) {
          CHECK((m.at(i, j) != kS) == keep[i][j]);
          if (keep[i][j]) {
            CHECK(m.at(i, j) == s.at(i, j));
            support[i].insert(j);
          }
        }
      if (!prev.empty())
        for (std::size_t i = 0; i < L; ++i)
          for (auto j : prev[i]) CHECK(support[i].count(j) == 1);
      prev = support;
    }
  }
}

TEST_CASE("temporal score examples") {
  Tape<double> tape(false);
  auto q = tape.constant(Tensor<double>::matrix({{1, 2}}));
  auto k = tape.constant(Tensor<double>::matrix({{3, 4}}));
  CHECK(temporal_scores(q, k, 2.0).value() == Tensor<double>::matrix({{1.5, 2}, {3, 4}}));

  auto eye = tape.constant(Tensor<double>::matrix({{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}));
  CHECK(temporal_scores(eye, eye, 1.0).value() == Tensor<double>::matrix({{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}));

  Rng rng(3);
  auto a = normal_tensor<double>({4, 6}, 1.0, rng);
  auto s1 = temporal_scores(tape.constant(a), tape.constant(a), std::sqrt(4.0)).value();
  auto s2 = temporal_scores(tape.constant(a), tape.constant(a), std::sqrt(16.0)).value();
  for (std::size_t i = 0; i < s1.size(); ++i) CHECK(s2[i] == doctest::Approx(s1[i] / 2).epsilon(1e-15));
  CHECK_THROWS_AS(temporal_scores(tape.constant(a), tape.constant(Tensor<double>(Shape{4, 5})), 1.0), ShapeError);
}

TEST_CASE("projections") {
  Rng rng(4);
  auto x = normal_tensor<double>({4, 16}, 1.0, rng);
  Tape<double> tape(false);
  auto id = project_qkv(tape, passthrough(4), tape.constant(x));
  CHECK(id.q.value() == x);
  CHECK(id.k.value() == x);
  CHECK(id.v.value() == x);

  auto zero = passthrough(4);
  for (auto* pd : {&zero.q, &zero.k, &zero.v}) pd->point.w.value.fill(0);
  auto z = project_qkv(tape, zero, tape.constant(x));
  CHECK(z.q.value() == Tensor<double>(Shape{4, 16}));

  auto rnd = TssaParams<double>::init(4, 50, 0, rng);
  CHECK(rnd.alpha == 2.0);
  auto r = project_qkv(tape, rnd, tape.constant(x));
  CHECK(r.v.shape() == Shape{4, 16});
}

TEST_CASE("tssa forward against brute-force attention") {
  Rng rng(6);
  for (double e : {25.0, 50.0, 100.0}) {
    auto p = TssaParams<double>::init(2, e, 0, rng);
    auto x = normal_tensor<double>({2, 4}, 1.0, rng);
    Tape<double> tape(false);
    auto qkv = project_qkv(tape, p, tape.constant(x));
    auto want = oracle::attention(qkv.q.value(), qkv.k.value(), qkv.v.value(), p.alpha, e);
    auto got = tssa_forward(tape, p, tape.constant(x)).value();
    CHECK(max_abs_diff(got, want) <= 1e-6);
    // convex hull: each output lies within the value range per channel
    const auto& v = qkv.v.value();
    for (std::size_t c = 0; c < 2; ++c) {
      double lo = 1e300, hi = -1e300;
      for (std::size_t t = 0; t < 4; ++t) lo = std::min(lo, v.at(c, t)), hi = std::max(hi, v.at(c, t));
      for (std::size_t t = 0; t < 4; ++t) {
        CHECK(got.at(c, t) >= lo - 1e-12);
        CHECK(got.at(c, t) <= hi + 1e-12);
      }
    }
  }
}

TEST_CASE("constant values pass through any mask") {
  Rng rng(8);
  auto q = normal_tensor<double>({3, 10}, 1.0, rng);
  auto k = normal_tensor<double>({3, 10}, 1.0, rng);
  Tensor<double> v(Shape{3, 10});
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t t = 0; t < 10; ++t) v.at(c, t) = static_cast<double>(c) - 0.5;
  for (double e : {10.0, 60.0, 100.0}) {
    Tape<double> tape(false);
    auto out = tssa_attend(tape.constant(q), tape.constant(k), tape.constant(v), 1.7, e).value();
    CHECK(max_abs_diff(out, v) <= 1e-14);
  }
}

TEST_CASE("dense case equals unmasked attention exactly") {
  Rng rng(9);
  auto q = normal_tensor<double>({4, 12}, 1.0, rng);
  auto k = normal_tensor<double>({4, 12}, 1.0, rng);
  auto v = normal_tensor<double>({4, 12}, 1.0, rng);
  Tape<double> tape(false);
  auto sparse = tssa_attend(tape.constant(q), tape.constant(k), tape.constant(v), 2.0, 100).value();
  auto s = temporal_scores(tape.constant(q), tape.constant(k), 2.0);
  auto dense = ops::transpose(ops::matmul(ops::softmax_rows(s), ops::transpose(tape.constant(v)))).value();
  CHECK(sparse == dense);
}

TEST_CASE("attention rows sum to one with exact zeros at masked positions") {
  Rng rng(10);
  for (std::size_t L : {8, 32}) {
    auto q = normal_tensor<double>({4, L}, 1.0, rng);
    auto k = normal_tensor<double>({4, L}, 1.0, rng);
    Tape<double> tape(false);
    auto m = max_e_mask(temporal_scores(tape.constant(q), tape.constant(k), 2.0), 30);
    auto a = ops::softmax_rows(m).value();
    for (std::size_t i = 0; i < L; ++i) {
      double sum = 0;
      std::size_t nz = 0;
      for (std::size_t j = 0; j < L; ++j) {
        if (m.value().at(i, j) == kS) CHECK(a.at(i, j) == 0.0);
        else ++nz;
        sum += a.at(i, j);
      }
      CHECK(nz == retained_count(30, L));
      CHECK(std::abs(sum - 1) <= 1e-6);
    }
  }
}

TEST_CASE("batched tssa equals per-window") {
  Rng rng(12);
  auto p = TssaParams<double>::init(3, 40, 0, rng);
  auto x = normal_tensor<double>({2, 3, 9}, 1.0, rng);
  Tape<double> tape(false);
  auto yb = tssa_forward(tape, p, tape.constant(x)).value();
  for (std::size_t b = 0; b < 2; ++b) {
    Tensor<double> xi(Shape{3, 9});
    std::copy(x.storage().begin() + b * 27, x.storage().begin() + (b + 1) * 27, xi.storage().begin());
    auto yi = tssa_forward(tape, p, tape.constant(xi)).value();
    for (std::size_t i = 0; i < yi.size(); ++i) CHECK(yi[i] == yb[b * 27 + i]);
  }
}

TEST_CASE("tssa gradient through retained entries") {
  Rng rng(14);
  auto p = TssaParams<double>::init(3, 50, 0, rng);
  auto x = normal_tensor<double>({3, 8}, 1.0, rng);
  auto target = normal_tensor<double>({3, 8}, 1.0, rng);
  auto f = [&](Tape<double>& t, Var<double> in) { return ops::mse_loss(tssa_forward(t, p, in), t.constant(target)); };
  // small step so no retained/discarded boundary is crossed
  CHECK(finite_diff_check(f, x, 1e-6) <= 1e-3);
}

TEST_CASE("tssa operation count") {
  // attention core is exactly 2 C L^2
  const std::size_t C = 16;
  auto core = [](std::size_t c, std::size_t l) { return 2 * c * l * l; };
  auto proj = [](std::size_t c, std::size_t l) { return 3 * (c * c + 3 * c) * l; };
  for (std::size_t L : {8, 64, 200}) CHECK(tssa_macs(C, L) == proj(C, L) + core(C, L));
  // quadratic in L at fixed C, linear in C at fixed L for the core
  const double r = static_cast<double>(tssa_macs(C, 2000)) / static_cast<double>(tssa_macs(C, 1000));
  CHECK(r == doctest::Approx(4.0).epsilon(0.05));
  CHECK(core(C, 400) == 4 * core(C, 200));
  CHECK(core(2 * C, 200) == 2 * core(C, 200));
}

TEST_CASE("invalid parameters") {
  Rng rng(1);
  auto p = TssaParams<double>::init(2, 50, 1, rng);
  p.keep_percent = 0;
  CHECK_THROWS(p.validate());
  p.keep_percent = 50;
  p.alpha = -1;
  CHECK_THROWS(p.validate());
}
