// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <fstream>
#include <set>
#include <utility>

#include "repiln/model.hpp"
#include "repiln/random.hpp"
#include "test_util.hpp"

using namespace repiln;
using testutil::TempDir;

namespace {

// Parameter count derived from the config alone.
std::size_t expected_params(const ModelConfig& c, bool deploy) {
  auto rep = [&](std::size_t ci, std::size_t co, std::size_t stride) {
    if (deploy) return co * ci * 3 + co;
    const bool id = ci == co && stride == 1;
    std::size_t n = co * ci * 3 + co + co * ci + co;
    if (c.norm_enabled) n += 2 * co * (id ? 3 : 2);
    return n;
  };
  auto gcu = [&](std::size_t C) {
    const auto h = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(c.expansion_ratio * double(C))));
    std::size_t n = (C * h + h) + (3 * h + h) + (C * h + h) + 3 * (h * h + h + 3 * h + h) + (h * C + C);
    if (c.gcu_pre_norm) n += 2 * C;
    return n;
  };
  std::size_t w = c.stage_channels[0];
  std::size_t n = rep(c.in_channels, w, 1);
  for (std::size_t s = 0; s < c.stage_channels.size(); ++s)
    for (std::size_t j = 0; j < c.blocks_per_stage[s]; ++j) {
      const bool last = j + 1 == c.blocks_per_stage[s];
      const std::size_t out = last ? c.stage_channels[s] : w;
      n += rep(w, out, last ? c.stage_strides[s] : 1) + gcu(out);
      w = out;
    }
  n += rep(w, w, 1);
  std::size_t f = w;
  for (auto h : c.head_hidden) n += f * h + h, f = h;
  return n + f * c.out_dim + c.out_dim;
}

template <typename T>
Tensor<T> random_windows(std::size_t B, const ModelConfig& c, std::uint64_t seed) {
  Rng rng(seed);
  return normal_tensor<T>({B, c.in_channels, c.window_length}, 1.0, rng);
}

}  // namespace

TEST_CASE("default config layout") {
  ModelConfig c;
  CHECK(c.stage_lengths(200) == std::vector<std::size_t>{200, 100, 50, 25});
  auto m = Model<float>::init(c, 1);
  CHECK(m.blocks.size() == 8);
  CHECK(m.tail.out_channels() == 256);
  CHECK(m.head.front().in_features() == 256);
  CHECK(m.head.front().out_features() == 512);
  CHECK(m.head.back().out_features() == 2);
  // stage-boundary blocks carry no outer skip
  std::size_t skips = 0;
  for (const auto& b : m.blocks) skips += b.outer_skip;
  CHECK(skips == 5);
  CHECK_FALSE(m.blocks[3].outer_skip);
  CHECK(m.blocks[3].rep.stride() == 2);
  CHECK(m.blocks[3].rep.out_channels() == 128);
}

TEST_CASE("config validation and text round trip") {
  ModelConfig c = testutil::tiny_config();
  c.tssa_e = 37.5;
  c.gate_activation = Activation::GELU;
  ModelConfig d;
  d.apply_text(c.to_text());
  CHECK(d.to_text() == c.to_text());
  CHECK_THROWS(d.apply_text("bogus=1"));
  CHECK_NOTHROW(d.apply_text("bogus=1", true));
  CHECK_THROWS(d.apply_text("window_length=abc"));

  ModelConfig bad = testutil::tiny_config(8, 20);  // 20 not divisible by 8
  CHECK_THROWS(bad.validate());
  bad = testutil::tiny_config();
  bad.stage_strides = {1, 3, 1, 1};
  CHECK_THROWS(bad.validate());
  bad = testutil::tiny_config();
  bad.tssa_e = 0;
  CHECK_THROWS(bad.validate());
}

TEST_CASE("zero final layer gives zero output") {
  auto c = testutil::tiny_config();
  auto m = Model<double>::init(c, 2);
  m.head.back().w.value.fill(0);
  m.head.back().b.value.fill(0);
  auto y = m.predict(random_windows<double>(4, c, 3));
  CHECK(y == Tensor<double>(Shape{4, 2}));
}

TEST_CASE("batch equals looped single windows bit-exactly") {
  auto c = testutil::tiny_config();
  auto m = Model<float>::init(c, 4);
  auto x = random_windows<float>(3, c, 5);
  auto yb = m.predict(x);
  const std::size_t n = c.in_channels * c.window_length;
  for (std::size_t b = 0; b < 3; ++b) {
    Tensor<float> xi(Shape{c.in_channels, c.window_length});
    std::copy(x.storage().begin() + b * n, x.storage().begin() + (b + 1) * n, xi.storage().begin());
    auto yi = m.predict(xi);
    REQUIRE(yi.shape() == Shape{2});
    CHECK(yi[0] == yb.at(b, 0));
    CHECK(yi[1] == yb.at(b, 1));
  }
}

TEST_CASE("input shape errors") {
  auto c = testutil::tiny_config();
  auto m = Model<float>::init(c, 4);
  CHECK_THROWS_AS(m.predict(Tensor<float>(Shape{5, 32})), ShapeError);
  CHECK_THROWS_AS(m.predict(Tensor<float>(Shape{32})), ShapeError);
}

TEST_CASE("outputs are finite for finite inputs") {
  ModelConfig c;
  auto m = Model<float>::init(c, 9);
  auto y = m.predict(random_windows<float>(2, c, 10));
  CHECK(y.all_finite());
}

TEST_CASE("closed-form parameter counts") {
  ModelConfig def;
  auto m = Model<float>::init(def, 1);
  CHECK(m.param_count() == expected_params(def, false));
  auto f = m.fused();
  CHECK(f.param_count() == expected_params(def, true));
  CHECK(f.param_count() < m.param_count());
  const double reduction = 1.0 - double(f.param_count()) / double(m.param_count());
  CHECK(reduction >= 0.10);
  CHECK(reduction <= 0.20);

  Rng rng(1);
  for (int trial = 0; trial < 12; ++trial) {
    ModelConfig c;
    c.stage_channels = {4 + 4 * std::size_t(trial % 2), 8, 8 + 4 * std::size_t(trial % 3), 12};
    c.blocks_per_stage = {1 + std::size_t(trial % 2), 2, 1, 1 + std::size_t(trial % 3)};
    c.window_length = 32;
    c.norm_enabled = trial % 4 != 0;
    c.gcu_pre_norm = trial % 3 == 0;
    c.expansion_ratio = trial % 2 ? 1.0 : 1.5;
    c.head_hidden = trial % 2 ? std::vector<std::size_t>{} : std::vector<std::size_t>{16, 8};
    auto mm = Model<float>::init(c, trial);
    CHECK(mm.param_count() == expected_params(c, false));
    CHECK(mm.fused().param_count() == expected_params(c, true));
    CHECK(mm.fused().param_count() < mm.param_count());
  }
}

TEST_CASE("count primitives by hand") {
  Rng rng(1);
  auto conv = Conv1dLayer<float>::init(2, 3, 3, {1, 1, 1}, rng);
  CHECK(conv.param_count() == 21);
  auto small = Conv1dLayer<float>::init(1, 1, 3, {1, 1, 1}, rng);
  CHECK(small.macs(4) == 12);
}

TEST_CASE("operation count grows superlinearly in the window") {
  ModelConfig c;
  auto m = Model<float>::init(c, 1);
  const auto a = m.macs(200), b = m.macs(400);
  CHECK(b > 2 * a);
  CHECK(m.fused().macs(200) < a);
}

TEST_CASE("fusion equivalence on random small configs in double precision") {
  for (int trial = 0; trial < 8; ++trial) {
    const std::size_t C = trial % 2 ? 8 : 4, L = trial % 4 < 2 ? 16 : 32;
    auto c = testutil::tiny_config(C, L);
    c.norm_enabled = trial != 3;
    c.gcu_pre_norm = trial % 3 == 1;
    auto m = Model<double>::init(c, 100 + trial);
    testutil::randomize_norms(m, 200 + trial);
    const auto f = m.fused();
    CHECK(f.form() == ModelForm::Deploy);
    for (const auto& b : f.blocks) CHECK(b.rep.is_fused());
    auto x = random_windows<double>(5, c, 300 + trial);
    CHECK(max_abs_diff(m.predict(x), f.predict(x)) <= 1e-10);
  }
}

TEST_CASE("fusing twice is rejected") {
  auto m = Model<float>::init(testutil::tiny_config(), 1);
  auto f = m.fused();
  CHECK_THROWS_AS(f.fused(), std::logic_error);
}

TEST_CASE("training-mode forward moves running statistics only") {
  auto c = testutil::tiny_config();
  auto m = Model<double>::init(c, 12);
  const auto before = std::get<0>(m.stem.params).norm3->running_mean;
  const auto w_before = std::get<0>(m.stem.params).w3.value;
  Tape<double> tape;
  auto x = random_windows<double>(4, c, 13);
  m.forward(tape, tape.constant(x), true);
  CHECK_FALSE(std::get<0>(m.stem.params).norm3->running_mean == before);
  CHECK(std::get<0>(m.stem.params).w3.value == w_before);
  // a const forward never mutates
  const auto after = std::get<0>(m.stem.params).norm3->running_mean;
  Tape<double> t2;
  std::as_const(m).forward(t2, t2.constant(x));
  CHECK(std::get<0>(m.stem.params).norm3->running_mean == after);
}

TEST_CASE("parameter names are unique and cover the count") {
  auto m = Model<float>::init(testutil::tiny_config(), 1);
  std::set<std::string> names;
  std::size_t total = 0;
  m.visit(
      [&](const std::string& n, Parameter<float>& p) {
        CHECK(names.insert(n).second);
        total += p.numel();
      },
      [&](const std::string& n, Tensor<float>&) { CHECK(names.insert(n).second); });
  CHECK(total == m.param_count());
}

// ---------------------------------------------------------------------------
// checkpoints

TEST_CASE("checkpoint round trip is bit-exact") {
  TempDir dir("ckpt");
  auto c = testutil::tiny_config();
  auto m = Model<float>::init(c, 21);
  testutil::randomize_norms(m, 22);
  m.input_mean = Tensor<float>(Shape{6}, 0.25f);
  m.input_std = Tensor<float>(Shape{6}, 2.0f);
  save_checkpoint(m, dir.file("a.rpln"));
  auto r = load_checkpoint<float>(dir.file("a.rpln"));
  auto x = random_windows<float>(3, c, 23);
  CHECK(r.predict(x) == m.predict(x));
  CHECK(r.config().to_text() == c.to_text());
  CHECK(*r.input_std == *m.input_std);

  auto f = m.fused();
  save_checkpoint(f, dir.file("d.rpln"));
  auto rf = load_checkpoint<float>(dir.file("d.rpln"), ModelForm::Deploy);
  CHECK(rf.form() == ModelForm::Deploy);
  CHECK(rf.predict(x) == f.predict(x));
  CHECK(read_checkpoint_header(dir.file("d.rpln")).form == ModelForm::Deploy);

  // saving the reloaded model reproduces the file byte for byte
  save_checkpoint(r, dir.file("b.rpln"));
  CHECK(testutil::slurp(dir.file("a.rpln")) == testutil::slurp(dir.file("b.rpln")));
}

TEST_CASE("checkpoint form mismatch and corruption") {
  TempDir dir("ckpt_bad");
  auto c = testutil::tiny_config();
  auto m = Model<float>::init(c, 1);
  save_checkpoint(m.fused(), dir.file("d.rpln"));
  CHECK_THROWS_AS(load_checkpoint<float>(dir.file("d.rpln"), ModelForm::Train), CheckpointError);

  save_checkpoint(m, dir.file("t.rpln"));
  const std::string good = testutil::slurp(dir.file("t.rpln"));
  auto write = [&](const std::string& name, const std::string& bytes) {
    std::ofstream(dir.file(name), std::ios::binary) << bytes;
    return dir.file(name);
  };

  std::string bad_magic = good;
  bad_magic[0] = 'X';
  try {
    load_checkpoint<float>(write("m.rpln", bad_magic));
    FAIL("expected throw");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find("offset 0") != std::string::npos);
  }

  std::string bad_version = good;
  bad_version[4] = 9;
  CHECK_THROWS_AS(load_checkpoint<float>(write("v.rpln", bad_version)), CheckpointError);

  CHECK_THROWS_AS(load_checkpoint<float>(write("cut.rpln", good.substr(0, good.size() / 2))), FormatError);

  // config says wider stem than the stored tensors
  std::string text = "stage_channels=8,8,16,16";
  std::string wider = good;
  wider.replace(wider.find(text), text.size(), "stage_channels=9,8,16,16");
  CHECK_THROWS_AS(load_checkpoint<float>(write("w.rpln", wider)), CheckpointError);

  CHECK_THROWS(load_checkpoint<float>(dir.file("missing.rpln")));
}
