// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "repiln/data.hpp"
#include "repiln/model.hpp"

namespace repiln {

/// Non-finite loss or gradient during optimization.
class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bias-corrected Adam moments for a fixed list of parameters.
template <typename T>
struct AdamState {
  std::vector<Tensor<T>> m, v;
  std::size_t t = 0;
  double lr = 1e-4;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

  static AdamState init(const std::vector<Parameter<T>*>& params, double lr);
};

/// One update from the gradients stored in each parameter. Throws
/// ShapeError if the list does not match the state and DivergenceError on a
/// non-finite gradient (parameters are left untouched in that case).
template <typename T>
void adam_step(AdamState<T>& state, const std::vector<Parameter<T>*>& params);

/// Reduce-on-plateau on validation loss, with a floor that ends training.
class PlateauScheduler {
 public:
  PlateauScheduler(double lr, double factor, std::size_t patience, double floor);

  /// Reports an epoch's validation loss; returns true if lr was reduced.
  bool step(double val_loss);
  double lr() const { return lr_; }
  /// True once lr has decayed below the floor.
  bool should_stop() const;

 private:
  double lr_, factor_, floor_;
  std::size_t patience_;
  std::size_t bad_ = 0;
  double best_;
  bool seen_ = false;
};

struct TrainConfig {
  double initial_lr = 1e-4;
  std::size_t max_epochs = 100;
  double lr_floor = 1e-6;
  double factor = 0.1;
  std::size_t patience = 10;
  std::size_t batch_size = 128;
  std::size_t window_stride = 10;
  std::uint64_t seed = 0;

  void validate() const;
  std::string to_text() const;
  /// Returns false if the key is not a training key.
  bool apply(const std::string& key, const std::string& value);
};

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0;
  double val_loss = 0;
  double lr = 0;  // rate used during the epoch
};

template <typename T>
struct TrainResult {
  Model<T> best;
  std::size_t best_epoch = 0;
  std::vector<EpochRecord> history;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Adam on minibatch MSE with seeded shuffling; the model with the lowest
/// validation loss is returned. Windows must already be normalized.
template <typename T>
TrainResult<T> train(Model<T> model, const std::vector<WindowSample<T>>& train_set,
                     const std::vector<WindowSample<T>>& val_set, const TrainConfig& cfg,
                     const EpochCallback& on_epoch = nullptr);

/// Mean squared error over a window set, evaluation mode.
template <typename T>
double evaluate_loss(const Model<T>& model, const std::vector<WindowSample<T>>& windows, std::size_t batch_size);

/// Stacks windows[idx[begin..end)] into [B, 6, L] and [B, 2].
template <typename T>
std::pair<Tensor<T>, Tensor<T>> make_batch(const std::vector<WindowSample<T>>& windows,
                                           const std::vector<std::size_t>& idx, std::size_t begin, std::size_t end);

/// `epoch,train_loss,val_loss,lr` lines, no header.
std::string history_text(const std::vector<EpochRecord>& history);
void write_history(const std::string& path, const std::vector<EpochRecord>& history);

}  // namespace repiln
