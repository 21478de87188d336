// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <string>
#include <vector>

#include "repiln/tensor.hpp"

namespace repiln {

using Vec2 = std::array<double, 2>;

/// Timestamped planar positions.
struct Trajectory {
  std::vector<double> time;
  std::vector<Vec2> pos;

  std::size_t size() const { return time.size(); }
  /// Strictly increasing time, matching lengths, at least two samples.
  void validate(const char* what) const;
  /// Linear interpolation; t must lie inside [time.front(), time.back()].
  Vec2 at(double t) const;
  /// Summed segment lengths.
  double length() const;
};

/// Dead reckoning: p[k+1] = p[k] + v[k] * (t[k+1] - t[k]). The last velocity
/// is unused.
Trajectory integrate_trajectory(const std::vector<double>& time, const std::vector<Vec2>& velocity, Vec2 p0);

/// RMSE of position error at the ground-truth timestamps that fall inside
/// the prediction's time span. No alignment.
double ate(const Trajectory& pred, const Trajectory& gt);

/// RMSE of relative-displacement error over intervals of `interval` seconds,
/// sliding at the ground-truth rate. Sequences shorter than the interval are
/// compared over their full span and scaled by interval / span.
double rte(const Trajectory& pred, const Trajectory& gt, double interval = 60.0);

struct SequenceMetrics {
  std::string name;
  double ate = 0;
  double rte = 0;
  double length = 0;
  Trajectory pred, gt;
};

struct EvalReport {
  std::vector<SequenceMetrics> sequences;
  std::size_t params = 0;
  std::size_t macs = 0;

  double mean_ate() const;
  double mean_rte() const;
};

/// Empirical CDF: sorted values with fractions i/n.
std::vector<std::pair<double, double>> empirical_cdf(std::vector<double> values);

/// metrics.csv, cdf_ate.csv, cdf_rte.csv and one trajectory_<name>.svg per
/// sequence.
void emit_report(const EvalReport& report, const std::string& out_dir);

}  // namespace repiln
