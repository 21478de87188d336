// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "repiln/tensor.hpp"

namespace repiln {

constexpr double kGravity = 9.81;
constexpr double kNominalRate = 200.0;

/// Raised when a sequence violates its invariants; the message names the
/// sequence and the offending array.
class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// One IMU recording with planar ground truth.
struct SequenceRecord {
  std::string name;
  Tensor<double> time;    // [N], seconds
  Tensor<double> gyro;    // [3, N], rad/s, body frame
  Tensor<double> accel;   // [3, N], m/s^2, body frame, gravity included
  Tensor<double> gt_pos;  // [2, N], m, world frame
  std::optional<Tensor<double>> gt_yaw;  // [N], rad

  std::size_t size() const { return time.size(); }
  double duration() const { return time[size() - 1] - time[0]; }
  /// Checks shapes, strictly increasing time, and that the mean rate is
  /// within 1% of `nominal_rate`.
  void validate(double nominal_rate = kNominalRate) const;
};

/// A window of IMU samples with its window-mean velocity target.
template <typename T>
struct WindowSample {
  Tensor<T> imu;  // [6, L]; rows 0-2 gyro, 3-5 accel
  std::array<double, 2> target_velocity{};
  double t_start = 0;
  double t_end = 0;
  bool normalized = false;
};

/// Reads `<root>/manifest.txt` and one directory of tensors per sequence.
std::vector<SequenceRecord> load_dataset(const std::string& root, double nominal_rate = kNominalRate);
SequenceRecord load_sequence(const std::string& dir, const std::string& name, double nominal_rate = kNominalRate);
void save_dataset(const std::string& root, const std::vector<SequenceRecord>& records);
void save_sequence(const std::string& dir, const SequenceRecord& record);

/// Windows at offsets 0, stride, 2*stride, ...; count floor((N - L) / stride) + 1.
template <typename T>
std::vector<WindowSample<T>> make_windows(const SequenceRecord& rec, std::size_t length, std::size_t stride);

/// Sequence-level 8:1:1 split after a seeded shuffle. Validation and test
/// each get at least one sequence when there are three or more.
struct DatasetSplit {
  std::vector<SequenceRecord> train, val, test;
};
DatasetSplit split_sequences(std::vector<SequenceRecord> records, std::uint64_t seed);

enum class Motion { Straight, Circle, RandomTurn };
std::string to_string(Motion m);
Motion parse_motion(const std::string& s);

struct SynthSpec {
  double duration = 10.0;  // s
  double rate = kNominalRate;  // Hz
  Motion motion = Motion::Straight;
  double speed = 1.0;    // m/s
  double radius = 2.0;   // m, circle
  double initial_yaw = 0.0;
  double max_turn_rate = 0.6;      // rad/s, random-turn segments
  double segment_duration = 2.0;   // s, random-turn segments
  double gyro_noise = 0.0;   // sigma, rad/s
  double accel_noise = 0.0;  // sigma, m/s^2
  std::array<double, 3> gyro_bias{};
  std::array<double, 3> accel_bias{};

  void validate() const;
};

/// Planar constant-speed motion sensed by a strapdown IMU. Ground truth is
/// exact; noise and biases are added to the sensor channels only.
SequenceRecord synth_generate(const SynthSpec& spec, std::uint64_t seed, const std::string& name = "seq");

/// Per-channel standardization of the IMU rows.
struct NormalizationStats {
  std::array<double, 6> mean{};
  std::array<double, 6> std{};
};

template <typename T>
NormalizationStats compute_stats(const std::vector<WindowSample<T>>& windows);

/// Standardizes in place. Throws on a window that is already normalized and
/// on a zero-sigma channel.
template <typename T>
void normalize(std::vector<WindowSample<T>>& windows, const NormalizationStats& stats);

/// Standardizes a [6, L] window or a [B, 6, L] batch.
template <typename T>
Tensor<T> normalize_input(const Tensor<T>& imu, const NormalizationStats& stats);

}  // namespace repiln
