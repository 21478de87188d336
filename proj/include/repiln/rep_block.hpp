// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <optional>
#include <variant>

#include "repiln/autograd.hpp"
#include "repiln/random.hpp"

namespace repiln {

/// Affine batch normalization attached to one branch.
template <typename T>
struct BranchNorm {
  Parameter<T> gamma;
  Parameter<T> beta;
  Tensor<T> running_mean;
  Tensor<T> running_var;
  T eps = T(1e-5);

  static BranchNorm identity(std::size_t channels);
  /// Per-channel scale gamma / sqrt(var + eps) under running statistics.
  std::vector<T> folded_scale() const;
  /// Exponential moving average toward batch statistics (unbiased variance).
  void update_running(const ops::NormStats<T>& batch, T momentum);
};

/// Multi-branch block: y = id(x) + phi(x) + psi(x), where phi is a kernel-3
/// convolution (padding 1), psi a kernel-1 convolution (padding 0) and id the
/// identity, each optionally followed by its own batch norm. The identity is
/// present only for stride 1 and equal channel counts.
template <typename T>
struct RepBlockTrainParams {
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t stride = 1;
  Parameter<T> w3, b3;  // [C_out, C_in, 3], [C_out]
  Parameter<T> w1, b1;  // [C_out, C_in, 1], [C_out]
  std::optional<BranchNorm<T>> norm3, norm1, norm_id;
  bool has_identity = false;

  /// Kaiming-uniform weights, zero biases, identity norms.
  static RepBlockTrainParams init(std::size_t in_channels, std::size_t out_channels, std::size_t stride,
                                  bool with_norm, Rng& rng);
  static RepBlockTrainParams zeros(std::size_t in_channels, std::size_t out_channels, std::size_t stride,
                                   bool with_norm);

  void validate() const;
  std::size_t param_count() const;
};

/// Single kernel-3 convolution equivalent to a fused RepBlockTrainParams.
template <typename T>
struct RepBlockFusedParams {
  Parameter<T> w;  // [C_out, C_in, 3]
  Parameter<T> b;  // [C_out]
  std::size_t stride = 1;

  std::size_t in_channels() const { return w.value.dim(1); }
  std::size_t out_channels() const { return w.value.dim(0); }
  std::size_t param_count() const { return w.numel() + b.numel(); }
};

/// Forward pass with norms in inference mode (running statistics).
template <typename T>
Var<T> repblock_forward_train(Tape<T>& tape, const RepBlockTrainParams<T>& p, Var<T> x);

/// Forward pass with norms on batch statistics; folds the batch statistics
/// into the running ones with the given momentum.
template <typename T>
Var<T> repblock_forward_train_batch(Tape<T>& tape, RepBlockTrainParams<T>& p, Var<T> x, T momentum = T(0.1));

template <typename T>
Var<T> repblock_forward_fused(Tape<T>& tape, const RepBlockFusedParams<T>& p, Var<T> x);

/// Merges all branches and norms into one kernel-3 convolution.
template <typename T>
RepBlockFusedParams<T> fuse(const RepBlockTrainParams<T>& p);

/// Wraps a fused convolution back into train form as a phi-only block (no
/// psi contribution, no identity, no norm). Used to check that fusing is a
/// fixed point.
template <typename T>
RepBlockTrainParams<T> as_phi_only(const RepBlockFusedParams<T>& f);

/// A RepBlock in either form, followed by an activation that sits outside
/// the fused algebra.
template <typename T>
struct RepBlock {
  std::variant<RepBlockTrainParams<T>, RepBlockFusedParams<T>> params;
  Activation post_activation = Activation::ReLU;

  bool is_fused() const { return std::holds_alternative<RepBlockFusedParams<T>>(params); }
  std::size_t in_channels() const;
  std::size_t out_channels() const;
  std::size_t stride() const;
  std::size_t param_count() const;

  /// `batch_stats` selects training-mode norm statistics (train form only).
  Var<T> forward(Tape<T>& tape, Var<T> x, bool batch_stats);
  /// Inference forward; never mutates.
  Var<T> forward(Tape<T>& tape, Var<T> x) const;

  void fuse_in_place();
};

}  // namespace repiln
