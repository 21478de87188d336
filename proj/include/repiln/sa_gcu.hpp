// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <optional>

#include "repiln/rep_block.hpp"
#include "repiln/tssa.hpp"

namespace repiln {

/// Sparse-attention gated convolutional unit.
///
///   g   = act(depthwise(point_gate(x)))
///   v   = tssa(point_value(x))
///   out = point_out(g * v)
///
/// The surrounding residual add lives in the model.
template <typename T>
struct GcuParams {
  std::size_t channels = 0;         // C
  std::size_t hidden_channels = 0;  // C_h
  Conv1dLayer<T> pre_gate;          // C -> C_h, kernel 1
  Conv1dLayer<T> gate_depthwise;    // C_h, kernel 3, groups C_h
  Activation gate_activation = Activation::Sigmoid;
  Conv1dLayer<T> pre_value;         // C -> C_h, kernel 1
  TssaParams<T> tssa;               // over C_h
  Conv1dLayer<T> out;               // C_h -> C, kernel 1
  std::optional<BranchNorm<T>> pre_norm;

  /// hidden = max(1, round(expansion_ratio * channels)).
  static GcuParams init(std::size_t channels, double expansion_ratio, double keep_percent, double alpha,
                        Activation gate_activation, bool pre_norm, Rng& rng);
  void validate() const;
  std::size_t param_count() const;
  double expansion_ratio() const { return static_cast<double>(hidden_channels) / static_cast<double>(channels); }
};

/// Gating branch only; exposed for locality checks.
template <typename T>
Var<T> sa_gcu_gate(Tape<T>& tape, const GcuParams<T>& p, Var<T> x);

template <typename T>
Var<T> sa_gcu_forward(Tape<T>& tape, const GcuParams<T>& p, Var<T> x);

/// Training-mode variant: the optional pre-norm uses batch statistics and
/// updates its running statistics.
template <typename T>
Var<T> sa_gcu_forward_batch(Tape<T>& tape, GcuParams<T>& p, Var<T> x, T momentum = T(0.1));

std::size_t sa_gcu_macs(std::size_t channels, std::size_t hidden_channels, std::size_t length);

}  // namespace repiln
