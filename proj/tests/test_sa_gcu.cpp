// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>

#include "repiln/random.hpp"
#include "repiln/sa_gcu.hpp"
#include "oracles.hpp"

using namespace repiln;

namespace {

Tensor<double> run(const GcuParams<double>& p, const Tensor<double>& x) {
  Tape<double> tape(false);
  return sa_gcu_forward(tape, p, tape.constant(x)).value();
}

Tensor<double> conv(const Conv1dLayer<double>& l, const Tensor<double>& x) {
  return oracle::conv1d(x, l.w.value, &l.b.value, l.opt.stride, l.opt.padding, l.opt.groups);
}

// The five primitives composed by hand.
Tensor<double> composed(const GcuParams<double>& p, const Tensor<double>& x) {
  auto g = conv(p.gate_depthwise, conv(p.pre_gate, x));
  for (auto& v : g.storage()) v = 1.0 / (1.0 + std::exp(-v));
  const auto u = conv(p.pre_value, x);
  const auto& t = p.tssa;
  auto q = conv(t.q.depth, conv(t.q.point, u));
  auto k = conv(t.k.depth, conv(t.k.point, u));
  auto v = conv(t.v.depth, conv(t.v.point, u));
  auto a = oracle::attention(q, k, v, t.alpha, t.keep_percent);
  for (std::size_t i = 0; i < a.size(); ++i) a[i] *= g[i];
  return conv(p.out, a);
}

}  // namespace

TEST_CASE("saturated gate and identity output pass the value branch through") {
  Rng rng(1);
  auto p = GcuParams<double>::init(3, 1.0, 50, 0, Activation::Sigmoid, false, rng);
  p.gate_depthwise.b.value.fill(60.0);
  p.out.w.value.fill(0);
  for (std::size_t c = 0; c < 3; ++c) p.out.w.value.at(c, c, 0) = 1;
  auto x = normal_tensor<double>({3, 10}, 0.3, rng);
  Tape<double> tape(false);
  auto v = tssa_forward(tape, p.tssa, p.pre_value.forward(tape, tape.constant(x))).value();
  CHECK(max_abs_diff(run(p, x), v) <= 1e-12);
}

TEST_CASE("zero gate leaves only the output bias") {
  Rng rng(2);
  auto p = GcuParams<double>::init(4, 1.0, 50, 0, Activation::GELU, false, rng);
  p.pre_gate.w.value.fill(0);
  p.gate_depthwise.w.value.fill(0);
  for (std::size_t c = 0; c < 4; ++c) p.out.b.value[c] = 0.1 * static_cast<double>(c + 1);
  auto y = run(p, normal_tensor<double>({4, 7}, 1.0, rng));
  for (std::size_t c = 0; c < 4; ++c)
    for (std::size_t t = 0; t < 7; ++t) CHECK(y.at(c, t) == p.out.b.value[c]);
}

TEST_CASE("random unit matches the composition oracle") {
  Rng rng(3);
  for (double expansion : {1.0, 0.5, 2.0}) {
    auto p = GcuParams<double>::init(4, expansion, 50, 0, Activation::Sigmoid, false, rng);
    for (auto* l : {&p.pre_gate, &p.gate_depthwise, &p.pre_value, &p.out, &p.tssa.q.point, &p.tssa.v.depth})
      l->b.value = normal_tensor<double>(l->b.value.shape(), 0.2, rng);
    auto x = normal_tensor<double>({4, 8}, 1.0, rng);
    auto y = run(p, x);
    CHECK(y.shape() == Shape{4, 8});
    CHECK(max_abs_diff(y, composed(p, x)) <= 1e-6);
  }
}

TEST_CASE("shape preserved for any expansion") {
  Rng rng(4);
  for (double e : {0.25, 1.0, 1.5, 3.0})
    for (std::size_t L : {1, 5, 16}) {
      auto p = GcuParams<double>::init(4, e, 25, 0, Activation::GELU, e > 1, rng);
      CHECK(p.hidden_channels == std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(e * 4))));
      CHECK(run(p, normal_tensor<double>({4, L}, 1.0, rng)).shape() == Shape{4, L});
    }
}

TEST_CASE("gate is local") {
  Rng rng(5);
  auto p = GcuParams<double>::init(3, 1.0, 50, 0, Activation::Sigmoid, false, rng);
  auto x = normal_tensor<double>({3, 20}, 1.0, rng);
  Tape<double> tape(false);
  const auto g = sa_gcu_gate(tape, p, tape.constant(x)).value();
  for (std::size_t t : {0, 7, 19}) {
    auto y = normal_tensor<double>({3, 20}, 5.0, rng);
    for (std::size_t s = 0; s < 20; ++s)
      if (s + 2 >= t && s <= t + 2)
        for (std::size_t c = 0; c < 3; ++c) y.at(c, s) = x.at(c, s);
    auto gy = sa_gcu_gate(tape, p, tape.constant(y)).value();
    for (std::size_t c = 0; c < 3; ++c) CHECK(gy.at(c, t) == g.at(c, t));
  }
}

TEST_CASE("unit gradient matches finite differences") {
  Rng rng(6);
  auto p = GcuParams<double>::init(3, 1.0, 50, 0, Activation::GELU, false, rng);
  auto x = normal_tensor<double>({3, 8}, 1.0, rng);
  auto target = normal_tensor<double>({3, 8}, 1.0, rng);
  auto f = [&](Tape<double>& t, Var<double> in) { return ops::mse_loss(sa_gcu_forward(t, p, in), t.constant(target)); };
  CHECK(finite_diff_check(f, x, 1e-6) <= 1e-3);
}

TEST_CASE("parameter and operation counts") {
  Rng rng(7);
  auto p = GcuParams<double>::init(4, 2.0, 50, 0, Activation::Sigmoid, false, rng);
  const std::size_t C = 4, H = 8;
  const std::size_t tssa = 3 * (H * H + H + H * 3 + H);
  CHECK(p.param_count() == (C * H + H) + (H * 3 + H) + (C * H + H) + tssa + (H * C + C));
  CHECK(p.expansion_ratio() == 2.0);
  CHECK(sa_gcu_macs(C, H, 10) == C * H * 10 + H * 3 * 10 + C * H * 10 + tssa_macs(H, 10) + H * C * 10 + H * 10);
}

TEST_CASE("invalid configuration") {
  Rng rng(8);
  CHECK_THROWS(GcuParams<double>::init(0, 1.0, 50, 0, Activation::Sigmoid, false, rng));
  auto p = GcuParams<double>::init(4, 1.0, 50, 0, Activation::Sigmoid, false, rng);
  p.out = Conv1dLayer<double>::pointwise(4, 3, rng);
  CHECK_THROWS(p.validate());
}
