// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "repiln/tensor.hpp"

namespace repiln {

/// Trainable tensor with its accumulated gradient. The gradient is mutable:
/// accumulating into it during backward does not change the parameter.
template <typename T>
struct Parameter {
  Tensor<T> value;
  mutable Tensor<T> grad;

  Parameter() = default;
  explicit Parameter(Tensor<T> v) : value(std::move(v)), grad(value.shape()) {}

  void zero_grad() const {
    if (grad.shape() != value.shape())
      grad = Tensor<T>(value.shape());
    else
      grad.fill(T(0));
  }
  std::size_t numel() const { return value.size(); }
};

template <typename T>
class Tape;

/// Handle to a value recorded on a Tape.
template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;
};

/// Linear record of operations for reverse-mode differentiation.
///
/// Nodes live in a deque so references to recorded values stay valid while
/// new nodes are appended. Ops are free functions below; each computes its
/// output eagerly and registers a backward rule when any input requires grad
/// and recording is enabled. With recording disabled the tape is a plain
/// evaluation arena.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor<T>& out_grad)>;

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const { return grad_enabled_; }

  Var<T> constant(Tensor<T> value);
  Var<T> leaf(Tensor<T> value, bool requires_grad = true);
  /// Binds a parameter; backward() adds the node's gradient into p.grad.
  Var<T> param(const Parameter<T>& p);

  Var<T> record(Tensor<T> value, const std::vector<Var<T>>& inputs, BackwardFn backward);

  const Tensor<T>& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  /// Gradient of a node after backward(); zeros if it never received one.
  Tensor<T> grad(Var<T> v) const;

  void accumulate(std::size_t id, const Tensor<T>& g);

  /// Populates gradients of every requires-grad node reachable from `loss`.
  /// Throws on non-scalar loss, on a loss that does not depend on any
  /// requires-grad leaf, and when called twice without reset_grads().
  void backward(Var<T> loss);
  void reset_grads();

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    const Parameter<T>* param = nullptr;
    BackwardFn backward;
  };

  std::deque<Node> nodes_;
  bool grad_enabled_;
  bool backward_done_ = false;
};

template <typename T>
const Tensor<T>& Var<T>::value() const {
  return tape->value(id);
}
template <typename T>
bool Var<T>::requires_grad() const {
  return tape->requires_grad(id);
}

enum class Activation { Identity, ReLU, Sigmoid, GELU };

std::string to_string(Activation a);
Activation parse_activation(const std::string& s);

template <typename T>
T apply_activation(Activation kind, T x);

struct Conv1dOptions {
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t groups = 1;
};

std::size_t conv1d_output_length(std::size_t length, std::size_t kernel, const Conv1dOptions& opt);

namespace ops {

/// Cross-correlation over the last axis. x is [C_in, L] or [B, C_in, L];
/// w is [C_out, C_in/groups, K]; bias, when given, is [C_out].
template <typename T>
Var<T> conv1d(Var<T> x, Var<T> w, std::optional<Var<T>> bias, const Conv1dOptions& opt);

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b);

template <typename T>
Var<T> transpose(Var<T> a);

/// Row softmax over the last axis. Entries equal to masked_sentinel<T>()
/// map to exactly zero; a row consisting only of sentinels is an error.
template <typename T>
Var<T> softmax_rows(Var<T> s);

/// Keeps the k largest entries of each row (ties prefer the lower column)
/// and replaces the rest with masked_sentinel<T>(). Gradients pass straight
/// through retained entries and are zero elsewhere.
template <typename T>
Var<T> topk_mask_rows(Var<T> s, std::size_t k);

template <typename T>
Var<T> add(Var<T> a, Var<T> b);
template <typename T>
Var<T> sub(Var<T> a, Var<T> b);
template <typename T>
Var<T> mul(Var<T> a, Var<T> b);
template <typename T>
Var<T> scale(Var<T> a, T c);
template <typename T>
Var<T> activation(Var<T> a, Activation kind);

template <typename T>
Var<T> sum(Var<T> a);
template <typename T>
Var<T> mse_loss(Var<T> pred, Var<T> target);

/// Mean over the last axis: [C, L] -> [C], [B, C, L] -> [B, C].
template <typename T>
Var<T> mean_last(Var<T> x);

/// x is [N] or [B, N]; w is [M, N]; bias [M].
template <typename T>
Var<T> linear(Var<T> x, Var<T> w, Var<T> bias);

template <typename T>
Var<T> select(Var<T> x, std::size_t index);
template <typename T>
Var<T> stack(const std::vector<Var<T>>& xs);

template <typename T>
struct NormStats {
  std::vector<T> mean;
  std::vector<T> var;  // biased
  std::size_t count = 0;
};

/// Per-channel normalization of [C, L] or [B, C, L].
///
/// With `batch_stats` the statistics come from the input (biased variance
/// over batch and length) and are written to `*batch_stats`; otherwise the
/// given running mean/var are used as constants.
template <typename T>
Var<T> batch_norm(Var<T> x, Var<T> gamma, Var<T> beta, const Tensor<T>& running_mean,
                  const Tensor<T>& running_var, T eps, NormStats<T>* batch_stats);

}  // namespace ops

/// Scalar-valued function of a single tensor, built on a tape.
template <typename T>
using TapeFunction = std::function<Var<T>(Tape<T>&, Var<T>)>;

/// Max over coordinates of |analytic - central difference| / (|analytic| + 1e-8).
/// `coords` restricts the comparison to a subset of flat indices.
double finite_diff_check(const TapeFunction<double>& f, const Tensor<double>& x, double h,
                         const std::vector<std::size_t>* coords = nullptr);

}  // namespace repiln
