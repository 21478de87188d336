// SPDX-License-Identifier: Apache-2.0
#include "repiln/pipeline.hpp"

#include <algorithm>
#include <numeric>

namespace repiln {

template <typename T>
void set_input_stats(Model<T>& model, const NormalizationStats& stats) {
  const std::size_t C = model.config().in_channels;
  if (C != 6) throw ShapeError("input statistics cover 6 IMU channels, model has " + std::to_string(C));
  Tensor<T> mean(Shape{C}), std(Shape{C});
  for (std::size_t c = 0; c < C; ++c) {
    mean[c] = static_cast<T>(stats.mean[c]);
    std[c] = static_cast<T>(stats.std[c]);
  }
  model.input_mean = std::move(mean);
  model.input_std = std::move(std);
}

template <typename T>
Tensor<T> prepare_input(const Model<T>& model, const Tensor<T>& imu) {
  if (!model.input_mean || !model.input_std) return imu;
  NormalizationStats s;
  for (std::size_t c = 0; c < 6; ++c) {
    s.mean[c] = (*model.input_mean)[c];
    s.std[c] = (*model.input_std)[c];
  }
  return normalize_input(imu, s);
}

Trajectory dead_reckon(const std::vector<double>& window_start, double last_end, const std::vector<Vec2>& velocity,
                       Vec2 p0) {
  if (window_start.empty() || window_start.size() != velocity.size())
    throw std::invalid_argument("dead_reckon: need one velocity per window");
  std::vector<double> t = window_start;
  t.push_back(last_end);
  std::vector<Vec2> v = velocity;
  v.push_back(velocity.back());
  return integrate_trajectory(t, v, p0);
}

Trajectory ground_truth(const SequenceRecord& rec) {
  Trajectory gt;
  gt.time.assign(rec.time.storage().begin(), rec.time.storage().end());
  for (std::size_t i = 0; i < rec.size(); ++i) gt.pos.push_back({rec.gt_pos.at(0, i), rec.gt_pos.at(1, i)});
  return gt;
}

template <typename T>
SequencePrediction predict_sequence(const Model<T>& model, const SequenceRecord& rec, std::size_t stride,
                                    std::size_t batch_size) {
  const std::size_t L = model.config().window_length;
  if (rec.size() < L)
    throw ShapeError("sequence '" + rec.name + "' has " + std::to_string(rec.size()) +
                     " samples, fewer than the model window " + std::to_string(L));
  auto windows = make_windows<T>(rec, L, stride ? stride : L);
  for (auto& w : windows) w.imu = prepare_input(model, w.imu);

  SequencePrediction out;
  std::vector<std::size_t> idx(windows.size());
  std::iota(idx.begin(), idx.end(), 0);
  for (std::size_t b = 0; b < idx.size(); b += batch_size) {
    const std::size_t e = std::min(idx.size(), b + batch_size);
    Tensor<T> x(Shape{e - b, 6, L});
    for (std::size_t i = b; i < e; ++i)
      std::copy(windows[i].imu.storage().begin(), windows[i].imu.storage().end(),
                x.storage().begin() + static_cast<std::ptrdiff_t>((i - b) * 6 * L));
    const Tensor<T> v = model.predict(x);
    for (std::size_t i = b; i < e; ++i) out.velocity.push_back({double(v.at(i - b, 0)), double(v.at(i - b, 1))});
  }
  for (const auto& w : windows) {
    out.window_start.push_back(w.t_start);
    out.window_end.push_back(w.t_end);
  }
  out.gt = ground_truth(rec);
  out.pred = dead_reckon(out.window_start, out.window_end.back(), out.velocity, out.gt.pos.front());
  return out;
}

SequenceMetrics score(const std::string& name, const SequencePrediction& p, double rte_interval) {
  SequenceMetrics m;
  m.name = name;
  m.ate = ate(p.pred, p.gt);
  m.rte = rte(p.pred, p.gt, rte_interval);
  m.length = p.gt.length();
  m.pred = p.pred;
  m.gt = p.gt;
  return m;
}

template <typename T>
EvalReport evaluate_model(const Model<T>& model, const std::vector<SequenceRecord>& records, double rte_interval) {
  EvalReport r;
  r.params = model.param_count();
  r.macs = model.macs(model.config().window_length);
  for (const auto& rec : records) r.sequences.push_back(score(rec.name, predict_sequence(model, rec), rte_interval));
  return r;
}

template <typename T>
std::vector<WindowSample<T>> windows_of(const std::vector<SequenceRecord>& records, std::size_t length,
                                        std::size_t stride) {
  std::vector<WindowSample<T>> out;
  for (const auto& r : records) {
    auto w = make_windows<T>(r, length, stride);
    std::move(w.begin(), w.end(), std::back_inserter(out));
  }
  return out;
}

#define REPILN_INSTANTIATE(T)                                                                                 \
  template void set_input_stats(Model<T>&, const NormalizationStats&);                                       \
  template Tensor<T> prepare_input(const Model<T>&, const Tensor<T>&);                                      \
  template SequencePrediction predict_sequence(const Model<T>&, const SequenceRecord&, std::size_t, std::size_t); \
  template EvalReport evaluate_model(const Model<T>&, const std::vector<SequenceRecord>&, double);           \
  template std::vector<WindowSample<T>> windows_of(const std::vector<SequenceRecord>&, std::size_t, std::size_t);

REPILN_INSTANTIATE(float)
REPILN_INSTANTIATE(double)

}  // namespace repiln
