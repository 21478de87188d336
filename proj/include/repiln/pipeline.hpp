// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <vector>

#include "repiln/data.hpp"
#include "repiln/evaluation.hpp"
#include "repiln/model.hpp"

// Glue between the data, model and evaluation layers.

namespace repiln {

/// Stores the standardization inside the model so checkpoints carry it.
template <typename T>
void set_input_stats(Model<T>& model, const NormalizationStats& stats);

/// Raw IMU windows standardized with the model's stored statistics (if any).
template <typename T>
Tensor<T> prepare_input(const Model<T>& model, const Tensor<T>& imu);

/// Window-level velocities over a sequence and the dead-reckoned trajectory.
struct SequencePrediction {
  std::vector<double> window_start, window_end;
  std::vector<Vec2> velocity;
  Trajectory pred, gt;
};

/// Each velocity holds from its window's start until the next window's
/// start; the trajectory ends at the last window's end.
Trajectory dead_reckon(const std::vector<double>& window_start, double last_end, const std::vector<Vec2>& velocity,
                       Vec2 p0);

Trajectory ground_truth(const SequenceRecord& rec);

/// Windows of the model's length at `stride` (0 selects the window length).
template <typename T>
SequencePrediction predict_sequence(const Model<T>& model, const SequenceRecord& rec, std::size_t stride = 0,
                                    std::size_t batch_size = 64);

/// Metrics for one prediction against its ground truth.
SequenceMetrics score(const std::string& name, const SequencePrediction& p, double rte_interval = 60.0);

template <typename T>
EvalReport evaluate_model(const Model<T>& model, const std::vector<SequenceRecord>& records,
                          double rte_interval = 60.0);

/// Windows of every record, concatenated.
template <typename T>
std::vector<WindowSample<T>> windows_of(const std::vector<SequenceRecord>& records, std::size_t length,
                                        std::size_t stride);

}  // namespace repiln
