// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "repiln/autograd.hpp"
#include "repiln/random.hpp"

namespace repiln {

/// Convolution with bias and fixed geometry.
template <typename T>
struct Conv1dLayer {
  Parameter<T> w;  // [C_out, C_in/groups, K]
  Parameter<T> b;  // [C_out]
  Conv1dOptions opt;

  static Conv1dLayer init(std::size_t in_channels, std::size_t out_channels, std::size_t kernel,
                          const Conv1dOptions& opt, Rng& rng) {
    Conv1dLayer l;
    const std::size_t cg = in_channels / opt.groups;
    l.w = Parameter<T>(kaiming_uniform<T>({out_channels, cg, kernel}, cg * kernel, rng));
    l.b = Parameter<T>(Tensor<T>(Shape{out_channels}));
    l.opt = opt;
    return l;
  }
  /// Kernel-1 convolution.
  static Conv1dLayer pointwise(std::size_t in_channels, std::size_t out_channels, Rng& rng) {
    return init(in_channels, out_channels, 1, {1, 0, 1}, rng);
  }
  /// Kernel-3 depthwise convolution, length preserving.
  static Conv1dLayer depthwise(std::size_t channels, Rng& rng) {
    return init(channels, channels, 3, {1, 1, channels}, rng);
  }

  Var<T> forward(Tape<T>& tape, Var<T> x) const {
    return ops::conv1d(x, tape.param(w), std::optional(tape.param(b)), opt);
  }
  std::size_t in_channels() const { return w.value.dim(1) * opt.groups; }
  std::size_t out_channels() const { return w.value.dim(0); }
  std::size_t kernel() const { return w.value.dim(2); }
  std::size_t param_count() const { return w.numel() + b.numel(); }
  /// Multiply-accumulates for an output of length `out_length`.
  std::size_t macs(std::size_t out_length) const { return w.numel() * out_length; }
};

template <typename T>
struct LinearLayer {
  Parameter<T> w;  // [out, in]
  Parameter<T> b;  // [out]

  static LinearLayer init(std::size_t in, std::size_t out, Rng& rng) {
    LinearLayer l;
    l.w = Parameter<T>(kaiming_uniform<T>({out, in}, in, rng));
    l.b = Parameter<T>(Tensor<T>(Shape{out}));
    return l;
  }
  Var<T> forward(Tape<T>& tape, Var<T> x) const { return ops::linear(x, tape.param(w), tape.param(b)); }
  std::size_t in_features() const { return w.value.dim(1); }
  std::size_t out_features() const { return w.value.dim(0); }
  std::size_t param_count() const { return w.numel() + b.numel(); }
};

}  // namespace repiln
