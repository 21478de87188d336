// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <limits>
#include <map>

#include "repiln/random.hpp"
#include "repiln/training.hpp"
#include "test_util.hpp"

using namespace repiln;

namespace {

// Random windows; the target is a fixed affine function of the window mean
// of two channels, so a linear readout suffices.
template <typename T>
std::vector<WindowSample<T>> learnable(std::size_t n, std::size_t L, std::uint64_t seed, bool constant = false) {
  Rng rng(seed);
  std::vector<WindowSample<T>> out(n);
  for (auto& w : out) {
    w.imu = normal_tensor<T>({6, L}, 1.0, rng);
    double m0 = 0, m3 = 0;
    for (std::size_t t = 0; t < L; ++t) m0 += double(w.imu.at(0, t)), m3 += double(w.imu.at(3, t));
    m0 /= double(L), m3 /= double(L);
    w.target_velocity = constant ? std::array<double, 2>{0.7, -0.3} : std::array<double, 2>{0.5 + m0, -0.2 + m3};
    w.normalized = true;
  }
  return out;
}

ModelConfig small() {
  auto c = testutil::tiny_config(4, 16);
  c.head_hidden = {8};
  return c;
}

TrainConfig quick(std::size_t epochs, double lr = 1e-3) {
  TrainConfig t;
  t.initial_lr = lr;
  t.max_epochs = epochs;
  t.batch_size = 8;
  t.seed = 5;
  return t;
}

Tensor<double> vec(std::vector<double> v) {
  const std::size_t n = v.size();
  return Tensor<double>(Shape{n}, std::move(v));
}

std::string prefix(const std::string& name) { return name.substr(0, name.rfind('.')); }

}  // namespace

TEST_CASE("adam with zero gradient leaves parameters unchanged") {
  Parameter<double> p(vec({1.5, -2.0, 0.0}));
  std::vector<Parameter<double>*> ps{&p};
  auto st = AdamState<double>::init(ps, 0.1);
  for (int i = 0; i < 3; ++i) adam_step(st, ps);
  CHECK(p.value == vec({1.5, -2.0, 0.0}));
  CHECK(st.t == 3);
}

TEST_CASE("adam first step by hand") {
  Parameter<double> w(vec({0.0}));
  std::vector<Parameter<double>*> ps{&w};
  auto st = AdamState<double>::init(ps, 0.1);
  w.grad = vec({1.0});
  adam_step(st, ps);
  // m_hat = 1, v_hat = 1
  CHECK(w.value[0] == doctest::Approx(-0.1 / (1.0 + 1e-8)).epsilon(1e-15));

  // second step with g = 3, computed from the moment recurrences
  w.grad = vec({3.0});
  adam_step(st, ps);
  const double m = 0.9 * 0.1 + 0.1 * 3, v = 0.999 * 0.001 + 0.001 * 9;
  const double mh = m / (1 - 0.81), vh = v / (1 - 0.999 * 0.999);
  CHECK(w.value[0] == doctest::Approx(-0.1 / (1.0 + 1e-8) - 0.1 * mh / (std::sqrt(vh) + 1e-8)).epsilon(1e-12));
}

TEST_CASE("adam is deterministic") {
  auto run = [] {
    Rng rng(3);
    Parameter<float> a(normal_tensor<float>({4, 3}, 1.0, rng)), b(normal_tensor<float>({3}, 1.0, rng));
    std::vector<Parameter<float>*> ps{&a, &b};
    auto st = AdamState<float>::init(ps, 0.01);
    for (int i = 0; i < 5; ++i) {
      a.grad = normal_tensor<float>({4, 3}, 1.0, rng);
      b.grad = normal_tensor<float>({3}, 1.0, rng);
      adam_step(st, ps);
    }
    return std::pair{a.value, b.value};
  };
  CHECK(run() == run());
}

TEST_CASE("adam rejects bad gradients without touching parameters") {
  Parameter<double> p(vec({1, 2})), q(vec({3}));
  std::vector<Parameter<double>*> ps{&p, &q};
  auto st = AdamState<double>::init(ps, 0.1);
  p.grad = vec({1, 1});
  q.grad = vec({std::numeric_limits<double>::quiet_NaN()});
  CHECK_THROWS_AS(adam_step(st, ps), DivergenceError);
  CHECK(p.value == vec({1, 2}));
  CHECK(st.t == 0);

  std::vector<Parameter<double>*> fewer{&p};
  CHECK_THROWS_AS(adam_step(st, fewer), ShapeError);
}

TEST_CASE("scheduler under a forced plateau") {
  PlateauScheduler s(1e-4, 0.1, 10, 1e-6);
  std::vector<double> used;
  while (!s.should_stop()) {
    used.push_back(s.lr());
    s.step(1.0);
  }
  REQUIRE(used.size() == 31);
  for (std::size_t i = 0; i < 11; ++i) CHECK(used[i] == 1e-4);
  for (std::size_t i = 11; i < 21; ++i) CHECK(used[i] == doctest::Approx(1e-5).epsilon(1e-12));
  for (std::size_t i = 21; i < 31; ++i) CHECK(used[i] == doctest::Approx(1e-6).epsilon(1e-12));
  CHECK(s.lr() < 1e-6);

  // improvement resets the patience counter
  PlateauScheduler r(1.0, 0.5, 2, 0.01);
  CHECK_FALSE(r.step(5));
  CHECK_FALSE(r.step(6));
  CHECK_FALSE(r.step(4));
  CHECK_FALSE(r.step(4));
  CHECK(r.step(4));
  CHECK(r.lr() == 0.5);
}

TEST_CASE("training config") {
  TrainConfig c;
  CHECK_NOTHROW(c.validate());
  CHECK(c.initial_lr == 1e-4);
  CHECK(c.max_epochs == 100);
  CHECK(c.lr_floor == 1e-6);
  TrainConfig d;
  for (auto& [k, v] : parse_key_values(quick(7).to_text())) CHECK(d.apply(k, v));
  CHECK(d.to_text() == quick(7).to_text());
  CHECK_FALSE(d.apply("window_length", "8"));
  auto bad = c;
  bad.lr_floor = 1e-3;
  CHECK_THROWS(bad.validate());
  bad = c;
  bad.factor = 1.0;
  CHECK_THROWS(bad.validate());
  bad = c;
  bad.max_epochs = 101;
  CHECK_THROWS(bad.validate());
}

TEST_CASE("smoke training decreases the loss") {
  auto cfg = small();
  auto tr = learnable<float>(64, cfg.window_length, 1, true);
  auto va = learnable<float>(16, cfg.window_length, 2, true);
  auto res = train(Model<float>::init(cfg, 3), tr, va, quick(5));
  REQUIRE(res.history.size() == 5);
  for (std::size_t i = 1; i < 5; ++i) CHECK(res.history[i].train_loss < res.history[i - 1].train_loss);

  double best = res.history.front().val_loss;
  for (const auto& h : res.history) best = std::min(best, h.val_loss);
  CHECK(res.history[res.best_epoch - 1].val_loss == best);
  CHECK(evaluate_loss(res.best, va, 8) == doctest::Approx(best).epsilon(1e-6));
}

TEST_CASE("training stops at the floor on a flat loss") {
  // zero head and zero targets: loss and gradients are identically zero
  auto cfg = small();
  auto m = Model<float>::init(cfg, 1);
  m.head.back().w.value.fill(0);
  m.head.back().b.value.fill(0);
  auto tr = learnable<float>(8, cfg.window_length, 1);
  for (auto& w : tr) w.target_velocity = {0, 0};
  auto tc = quick(100, 1e-4);
  auto res = train(m, tr, tr, tc);
  CHECK(res.history.size() == 31);
  for (const auto& h : res.history) CHECK(h.lr >= 1e-6 * (1 - 1e-9));
  CHECK(res.best_epoch == 1);
}

TEST_CASE("epoch cap") {
  auto cfg = small();
  auto tr = learnable<float>(16, cfg.window_length, 4);
  auto res = train(Model<float>::init(cfg, 1), tr, tr, quick(3));
  CHECK(res.history.size() == 3);
  CHECK_THROWS(train(Model<float>::init(cfg, 1), {}, tr, quick(3)));
  CHECK_THROWS(train(Model<float>::init(cfg, 1).fused(), tr, tr, quick(3)));
}

TEST_CASE("every module receives a gradient") {
  // length 4 at the last stage: top-k keeps two scores per row. With one
  // kept score the softmax is constant and q/k get no gradient by design.
  auto cfg = small();
  cfg.window_length = 32;
  cfg.gcu_pre_norm = true;
  auto m = Model<double>::init(cfg, 7);
  auto before = m;
  auto data = learnable<double>(8, cfg.window_length, 8);
  std::vector<std::size_t> idx(8);
  for (std::size_t i = 0; i < 8; ++i) idx[i] = i;
  auto [x, y] = make_batch(data, idx, 0, 8);
  CHECK(x.shape() == Shape{8, 6, cfg.window_length});
  CHECK(y.shape() == Shape{8, 2});

  auto params = m.parameters();
  auto adam = AdamState<double>::init(params, 1e-3);
  Tape<double> tape;
  auto loss = ops::mse_loss(m.forward(tape, tape.constant(x), true), tape.constant(y));
  CHECK(loss.value()[0] > 0);
  tape.backward(loss);
  adam_step(adam, params);

  std::map<std::string, Tensor<double>> old;
  before.visit([&](const std::string& n, Parameter<double>& p) { old[n] = p.value; },
               [](const std::string&, Tensor<double>&) {});
  std::map<std::string, bool> changed;
  m.visit(
      [&](const std::string& n, Parameter<double>& p) {
        changed[prefix(n)] = changed[prefix(n)] || !(p.value == old.at(n));
      },
      [](const std::string&, Tensor<double>&) {});
  CHECK(changed.size() > 20);
  for (const auto& [module, moved] : changed) {
    CAPTURE(module);
    CHECK(moved);
  }
}

TEST_CASE("training is reproducible") {
  auto cfg = small();
  auto tr = learnable<float>(32, cfg.window_length, 9);
  auto va = learnable<float>(8, cfg.window_length, 10);
  auto a = train(Model<float>::init(cfg, 2), tr, va, quick(3));
  auto b = train(Model<float>::init(cfg, 2), tr, va, quick(3));
  CHECK(history_text(a.history) == history_text(b.history));
  auto x = make_batch(va, {0, 1, 2}, 0, 3).first;
  CHECK(a.best.predict(x) == b.best.predict(x));

  auto tc = quick(3);
  tc.seed = 6;
  auto c = train(Model<float>::init(cfg, 2), tr, va, tc);
  CHECK(history_text(c.history) != history_text(a.history));

  const auto text = history_text(a.history);
  CHECK(text.rfind("1,", 0) == 0);
  CHECK(std::count(text.begin(), text.end(), '\n') == 3);
}

TEST_CASE("divergence aborts with a diagnostic") {
  auto cfg = small();
  auto tr = learnable<float>(8, cfg.window_length, 11);
  tr[3].target_velocity[0] = std::numeric_limits<double>::infinity();
  try {
    train(Model<float>::init(cfg, 1), tr, tr, quick(2));
    FAIL("expected divergence");
  } catch (const DivergenceError& e) {
    CHECK(std::string(e.what()).find("epoch 1") != std::string::npos);
  }
}
