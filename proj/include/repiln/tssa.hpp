// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>

#include "repiln/layers.hpp"

namespace repiln {

/// Point conv (kernel 1) followed by a depthwise kernel-3 conv.
template <typename T>
struct PointDepthwise {
  Conv1dLayer<T> point;
  Conv1dLayer<T> depth;

  static PointDepthwise init(std::size_t channels, Rng& rng) {
    return {Conv1dLayer<T>::pointwise(channels, channels, rng), Conv1dLayer<T>::depthwise(channels, rng)};
  }
  Var<T> forward(Tape<T>& tape, Var<T> x) const { return depth.forward(tape, point.forward(tape, x)); }
  std::size_t param_count() const { return point.param_count() + depth.param_count(); }
};

/// Temporal-scale sparse attention parameters.
template <typename T>
struct TssaParams {
  std::size_t channels = 0;
  PointDepthwise<T> q, k, v;
  double alpha = 1.0;       // score divisor
  double keep_percent = 50; // e, percentage of each score row retained

  /// alpha defaults to sqrt(channels) when not positive.
  static TssaParams init(std::size_t channels, double keep_percent, double alpha, Rng& rng);
  void validate() const;
  std::size_t param_count() const { return q.param_count() + k.param_count() + v.param_count(); }
};

template <typename T>
struct QkvProjection {
  Var<T> q, k, v;
};

/// Number of entries kept per row: max(1, ceil(keep_percent / 100 * length)).
std::size_t retained_count(double keep_percent, std::size_t length);

template <typename T>
QkvProjection<T> project_qkv(Tape<T>& tape, const TssaParams<T>& p, Var<T> x);

/// S[t, s] = sum_c Q[c, t] K[c, s] / alpha. Rows index query steps, columns
/// key steps.
template <typename T>
Var<T> temporal_scores(Var<T> q, Var<T> k, double alpha);

/// Keeps the top keep_percent% of every row, sentinel elsewhere.
template <typename T>
Var<T> max_e_mask(Var<T> scores, double keep_percent);

/// out[c, t] = sum_s A[t, s] V[c, s] with A = softmax_rows(max_e_mask(S)).
/// Accepts [C, L] or [B, C, L].
template <typename T>
Var<T> tssa_forward(Tape<T>& tape, const TssaParams<T>& p, Var<T> x);

/// Attention step on already projected Q, K, V ([C, L] each).
template <typename T>
Var<T> tssa_attend(Var<T> q, Var<T> k, Var<T> v, double alpha, double keep_percent);

/// Multiply-accumulates of one tssa_forward over a [C, L] input: projections
/// plus the two L x L contractions.
std::size_t tssa_macs(std::size_t channels, std::size_t length);

}  // namespace repiln
