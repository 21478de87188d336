// SPDX-License-Identifier: Apache-2.0
#include "repiln/training.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>

#include "repiln/random.hpp"

namespace repiln {

template <typename T>
AdamState<T> AdamState<T>::init(const std::vector<Parameter<T>*>& params, double lr) {
  AdamState s;
  s.lr = lr;
  for (const auto* p : params) {
    s.m.emplace_back(p->value.shape());
    s.v.emplace_back(p->value.shape());
  }
  return s;
}

template <typename T>
void adam_step(AdamState<T>& s, const std::vector<Parameter<T>*>& params) {
  if (params.size() != s.m.size())
    throw ShapeError("adam_step: " + std::to_string(params.size()) + " parameters for a state of " +
                     std::to_string(s.m.size()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& p = *params[i];
    if (p.value.shape() != s.m[i].shape() || p.grad.shape() != p.value.shape())
      throw ShapeError("adam_step: parameter " + std::to_string(i) + " has shape " + shape_str(p.value.shape()) +
                       ", state expects " + shape_str(s.m[i].shape()));
    if (!p.grad.all_finite())
      throw DivergenceError("non-finite gradient in parameter " + std::to_string(i));
  }
  ++s.t;
  const double c1 = 1.0 - std::pow(s.beta1, static_cast<double>(s.t));
  const double c2 = 1.0 - std::pow(s.beta2, static_cast<double>(s.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& w = params[i]->value;
    const auto& g = params[i]->grad;
    auto& m = s.m[i];
    auto& v = s.v[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double gj = g[j];
      const double mj = s.beta1 * m[j] + (1 - s.beta1) * gj;
      const double vj = s.beta2 * v[j] + (1 - s.beta2) * gj * gj;
      m[j] = static_cast<T>(mj);
      v[j] = static_cast<T>(vj);
      w[j] = static_cast<T>(w[j] - s.lr * (mj / c1) / (std::sqrt(vj / c2) + s.eps));
    }
  }
}

PlateauScheduler::PlateauScheduler(double lr, double factor, std::size_t patience, double floor)
    : lr_(lr), factor_(factor), floor_(floor), patience_(patience), best_(0) {
  if (!(lr > 0) || !(factor > 0 && factor < 1) || !(floor > 0) || patience == 0)
    throw std::invalid_argument("invalid scheduler settings");
}

bool PlateauScheduler::step(double val_loss) {
  if (!seen_ || val_loss < best_) {
    seen_ = true;
    best_ = val_loss;
    bad_ = 0;
    return false;
  }
  if (++bad_ < patience_) return false;
  lr_ *= factor_;
  bad_ = 0;
  return true;
}

// Repeated multiplication by 0.1 lands a few ulps off 1e-6; the relative
// slack keeps an lr that is "equal" to the floor running.
bool PlateauScheduler::should_stop() const { return lr_ < floor_ * (1 - 1e-9); }

// ---------------------------------------------------------------------------
// config

namespace {

template <typename N>
N parse_num(const std::string& key, const std::string& v) {
  N out{};
  auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (res.ec != std::errc() || res.ptr != v.data() + v.size())
    throw std::invalid_argument("config " + key + ": not a valid number: '" + v + "'");
  return out;
}

}  // namespace

void TrainConfig::validate() const {
  if (!(lr_floor > 0 && lr_floor < initial_lr)) throw std::invalid_argument("need 0 < lr_floor < lr");
  if (!(factor > 0 && factor < 1)) throw std::invalid_argument("lr_factor must lie in (0, 1)");
  if (patience == 0) throw std::invalid_argument("patience must be positive");
  if (max_epochs == 0 || max_epochs > 100) throw std::invalid_argument("epochs must lie in [1, 100]");
  if (batch_size == 0) throw std::invalid_argument("batch_size must be positive");
  if (window_stride == 0) throw std::invalid_argument("window_stride must be positive");
}

std::string TrainConfig::to_text() const {
  std::string s;
  s += "lr=" + format_double(initial_lr) + "\n";
  s += "epochs=" + std::to_string(max_epochs) + "\n";
  s += "lr_floor=" + format_double(lr_floor) + "\n";
  s += "lr_factor=" + format_double(factor) + "\n";
  s += "patience=" + std::to_string(patience) + "\n";
  s += "batch_size=" + std::to_string(batch_size) + "\n";
  s += "window_stride=" + std::to_string(window_stride) + "\n";
  s += "seed=" + std::to_string(seed) + "\n";
  return s;
}

bool TrainConfig::apply(const std::string& key, const std::string& value) {
  if (key == "lr") initial_lr = parse_num<double>(key, value);
  else if (key == "epochs") max_epochs = parse_num<std::size_t>(key, value);
  else if (key == "lr_floor") lr_floor = parse_num<double>(key, value);
  else if (key == "lr_factor") factor = parse_num<double>(key, value);
  else if (key == "patience") patience = parse_num<std::size_t>(key, value);
  else if (key == "batch_size") batch_size = parse_num<std::size_t>(key, value);
  else if (key == "window_stride") window_stride = parse_num<std::size_t>(key, value);
  else if (key == "seed") seed = parse_num<std::uint64_t>(key, value);
  else return false;
  return true;
}

// ---------------------------------------------------------------------------
// loop

template <typename T>
std::pair<Tensor<T>, Tensor<T>> make_batch(const std::vector<WindowSample<T>>& windows,
                                           const std::vector<std::size_t>& idx, std::size_t begin, std::size_t end) {
  const auto& first = windows.at(idx.at(begin)).imu;
  const std::size_t C = first.dim(0), L = first.dim(1), B = end - begin;
  Tensor<T> x(Shape{B, C, L});
  Tensor<T> y(Shape{B, 2});
  for (std::size_t b = 0; b < B; ++b) {
    const auto& w = windows.at(idx[begin + b]);
    if (w.imu.shape() != first.shape())
      throw ShapeError("window shapes differ within a batch: " + shape_str(w.imu.shape()) + " vs " +
                       shape_str(first.shape()));
    std::copy(w.imu.storage().begin(), w.imu.storage().end(), x.storage().begin() + static_cast<std::ptrdiff_t>(b * C * L));
    y.at(b, 0) = static_cast<T>(w.target_velocity[0]);
    y.at(b, 1) = static_cast<T>(w.target_velocity[1]);
  }
  return {std::move(x), std::move(y)};
}

template <typename T>
double evaluate_loss(const Model<T>& model, const std::vector<WindowSample<T>>& windows, std::size_t batch_size) {
  if (windows.empty()) throw std::invalid_argument("evaluate_loss: no windows");
  std::vector<std::size_t> idx(windows.size());
  std::iota(idx.begin(), idx.end(), 0);
  double total = 0;
  for (std::size_t b = 0; b < idx.size(); b += batch_size) {
    const std::size_t e = std::min(idx.size(), b + batch_size);
    auto [x, y] = make_batch(windows, idx, b, e);
    const Tensor<T> pred = model.predict(x);
    for (std::size_t i = 0; i < pred.size(); ++i) {
      const double d = static_cast<double>(pred[i]) - static_cast<double>(y[i]);
      total += d * d;
    }
  }
  return total / static_cast<double>(windows.size() * 2);
}

template <typename T>
TrainResult<T> train(Model<T> model, const std::vector<WindowSample<T>>& train_set,
                     const std::vector<WindowSample<T>>& val_set, const TrainConfig& cfg,
                     const EpochCallback& on_epoch) {
  cfg.validate();
  if (train_set.empty()) throw std::invalid_argument("training set is empty");
  if (val_set.empty()) throw std::invalid_argument("validation set is empty");
  if (model.form() != ModelForm::Train) throw std::invalid_argument("only train-form models can be trained");

  auto params = model.parameters();
  auto adam = AdamState<T>::init(params, cfg.initial_lr);
  PlateauScheduler sched(cfg.initial_lr, cfg.factor, cfg.patience, cfg.lr_floor);
  Rng rng(mix_seed(cfg.seed, 0x7A11));

  TrainResult<T> result{model, 0, {}};
  double best_val = 0;
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);

  for (std::size_t epoch = 1; epoch <= cfg.max_epochs && !sched.should_stop(); ++epoch) {
    adam.lr = sched.lr();
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0;
    for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
      const std::size_t e = std::min(order.size(), b + cfg.batch_size);
      auto [x, y] = make_batch(train_set, order, b, e);
      model.zero_grad();
      Tape<T> tape;
      Var<T> pred = model.forward(tape, tape.constant(std::move(x)), true);
      Var<T> loss = ops::mse_loss(pred, tape.constant(std::move(y)));
      const double lv = loss.value()[0];
      if (!std::isfinite(lv))
        throw DivergenceError("non-finite training loss at epoch " + std::to_string(epoch) + ", batch " +
                              std::to_string(b / cfg.batch_size + 1));
      tape.backward(loss);
      try {
        adam_step(adam, params);
      } catch (const DivergenceError& err) {
        throw DivergenceError(std::string(err.what()) + " at epoch " + std::to_string(epoch));
      }
      total += lv * static_cast<double>(e - b);
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = adam.lr;
    rec.train_loss = total / static_cast<double>(order.size());
    rec.val_loss = evaluate_loss(model, val_set, cfg.batch_size);
    if (!std::isfinite(rec.val_loss))
      throw DivergenceError("non-finite validation loss at epoch " + std::to_string(epoch));
    if (result.best_epoch == 0 || rec.val_loss < best_val) {
      best_val = rec.val_loss;
      result.best = model;
      result.best_epoch = epoch;
    }
    result.history.push_back(rec);
    if (on_epoch) on_epoch(rec);
    sched.step(rec.val_loss);
  }
  result.best.zero_grad();
  return result;
}

std::string history_text(const std::vector<EpochRecord>& history) {
  std::string s;
  for (const auto& r : history)
    s += std::to_string(r.epoch) + "," + format_double(r.train_loss) + "," + format_double(r.val_loss) + "," +
         format_double(r.lr) + "\n";
  return s;
}

void write_history(const std::string& path, const std::vector<EpochRecord>& history) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + path);
  os << history_text(history);
}

#define REPILN_INSTANTIATE(T)                                                                                \
  template struct AdamState<T>;                                                                              \
  template void adam_step(AdamState<T>&, const std::vector<Parameter<T>*>&);                                 \
  template std::pair<Tensor<T>, Tensor<T>> make_batch(const std::vector<WindowSample<T>>&,                   \
                                                      const std::vector<std::size_t>&, std::size_t, std::size_t); \
  template double evaluate_loss(const Model<T>&, const std::vector<WindowSample<T>>&, std::size_t);          \
  template TrainResult<T> train(Model<T>, const std::vector<WindowSample<T>>&,                               \
                                const std::vector<WindowSample<T>>&, const TrainConfig&, const EpochCallback&);

REPILN_INSTANTIATE(float)
REPILN_INSTANTIATE(double)

}  // namespace repiln
