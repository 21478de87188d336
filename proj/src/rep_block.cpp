// SPDX-License-Identifier: Apache-2.0
#include "repiln/rep_block.hpp"

#include <cmath>
#include <stdexcept>

namespace repiln {

template <typename T>
BranchNorm<T> BranchNorm<T>::identity(std::size_t channels) {
  BranchNorm n;
  n.gamma = Parameter<T>(Tensor<T>(Shape{channels}, T(1)));
  n.beta = Parameter<T>(Tensor<T>(Shape{channels}, T(0)));
  n.running_mean = Tensor<T>(Shape{channels}, T(0));
  n.running_var = Tensor<T>(Shape{channels}, T(1));
  return n;
}

template <typename T>
std::vector<T> BranchNorm<T>::folded_scale() const {
  std::vector<T> s(gamma.value.size());
  for (std::size_t c = 0; c < s.size(); ++c) {
    if (!(running_var[c] > T(0))) throw std::domain_error("norm running variance must be positive");
    s[c] = gamma.value[c] / std::sqrt(running_var[c] + eps);
  }
  return s;
}

template <typename T>
void BranchNorm<T>::update_running(const ops::NormStats<T>& batch, T momentum) {
  const T unbias = batch.count > 1 ? static_cast<T>(batch.count) / static_cast<T>(batch.count - 1) : T(1);
  for (std::size_t c = 0; c < batch.mean.size(); ++c) {
    running_mean[c] = (T(1) - momentum) * running_mean[c] + momentum * batch.mean[c];
    running_var[c] = (T(1) - momentum) * running_var[c] + momentum * batch.var[c] * unbias;
  }
}

template <typename T>
RepBlockTrainParams<T> RepBlockTrainParams<T>::zeros(std::size_t in_channels, std::size_t out_channels,
                                                     std::size_t stride, bool with_norm) {
  if (in_channels == 0 || out_channels == 0) throw std::invalid_argument("RepBlock channels must be positive");
  if (stride != 1 && stride != 2) throw std::invalid_argument("RepBlock stride must be 1 or 2");
  RepBlockTrainParams p;
  p.in_channels = in_channels;
  p.out_channels = out_channels;
  p.stride = stride;
  p.w3 = Parameter<T>(Tensor<T>(Shape{out_channels, in_channels, 3}));
  p.b3 = Parameter<T>(Tensor<T>(Shape{out_channels}));
  p.w1 = Parameter<T>(Tensor<T>(Shape{out_channels, in_channels, 1}));
  p.b1 = Parameter<T>(Tensor<T>(Shape{out_channels}));
  p.has_identity = in_channels == out_channels && stride == 1;
  if (with_norm) {
    p.norm3 = BranchNorm<T>::identity(out_channels);
    p.norm1 = BranchNorm<T>::identity(out_channels);
    if (p.has_identity) p.norm_id = BranchNorm<T>::identity(out_channels);
  }
  return p;
}

template <typename T>
RepBlockTrainParams<T> RepBlockTrainParams<T>::init(std::size_t in_channels, std::size_t out_channels,
                                                    std::size_t stride, bool with_norm, Rng& rng) {
  RepBlockTrainParams p = zeros(in_channels, out_channels, stride, with_norm);
  p.w3.value = kaiming_uniform<T>({out_channels, in_channels, 3}, in_channels * 3, rng);
  p.w1.value = kaiming_uniform<T>({out_channels, in_channels, 1}, in_channels, rng);
  return p;
}

template <typename T>
void RepBlockTrainParams<T>::validate() const {
  const Shape s3{out_channels, in_channels, 3}, s1{out_channels, in_channels, 1}, sb{out_channels};
  if (w3.value.shape() != s3 || w1.value.shape() != s1 || b3.value.shape() != sb || b1.value.shape() != sb)
    throw ShapeError("RepBlock parameter shapes disagree with channel counts");
  if (has_identity && !(in_channels == out_channels && stride == 1))
    throw std::invalid_argument("RepBlock identity branch needs stride 1 and equal channels");
  if (norm_id && !has_identity) throw std::invalid_argument("identity norm without identity branch");
  for (const auto* n : {&norm3, &norm1, &norm_id})
    if (*n) {
      if ((*n)->gamma.value.shape() != sb || (*n)->running_var.shape() != sb)
        throw ShapeError("RepBlock norm shapes disagree with channel count");
      for (T v : (*n)->running_var.data())
        if (!(v > T(0))) throw std::domain_error("norm running variance must be positive");
    }
}

template <typename T>
std::size_t RepBlockTrainParams<T>::param_count() const {
  std::size_t n = w3.numel() + b3.numel() + w1.numel() + b1.numel();
  for (const auto* nm : {&norm3, &norm1, &norm_id})
    if (*nm) n += (*nm)->gamma.numel() + (*nm)->beta.numel();
  return n;
}

namespace {

template <typename T>
Var<T> apply_norm(Tape<T>& tape, const BranchNorm<T>& n, Var<T> x, ops::NormStats<T>* stats) {
  return ops::batch_norm(x, tape.param(n.gamma), tape.param(n.beta), n.running_mean, n.running_var, n.eps, stats);
}

// `mut` is non-null only in batch-statistics mode.
template <typename T>
Var<T> forward_impl(Tape<T>& tape, const RepBlockTrainParams<T>& p, RepBlockTrainParams<T>* mut, Var<T> x,
                    T momentum) {
  const std::size_t cin = x.shape()[x.shape().size() - 2];
  if (cin != p.in_channels)
    throw ShapeError("RepBlock expects " + std::to_string(p.in_channels) + " channels, got " + shape_str(x.shape()));
  ops::NormStats<T> s3, s1, sid;
  const bool batch = mut != nullptr;

  Var<T> y = ops::conv1d(x, tape.param(p.w3), std::optional(tape.param(p.b3)), {p.stride, 1, 1});
  if (p.norm3) y = apply_norm(tape, *p.norm3, y, batch ? &s3 : nullptr);

  Var<T> z = ops::conv1d(x, tape.param(p.w1), std::optional(tape.param(p.b1)), {p.stride, 0, 1});
  if (p.norm1) z = apply_norm(tape, *p.norm1, z, batch ? &s1 : nullptr);
  Var<T> out = ops::add(y, z);

  if (p.has_identity) {
    Var<T> id = x;
    if (p.norm_id) id = apply_norm(tape, *p.norm_id, x, batch ? &sid : nullptr);
    out = ops::add(out, id);
  }
  if (batch) {
    if (mut->norm3) mut->norm3->update_running(s3, momentum);
    if (mut->norm1) mut->norm1->update_running(s1, momentum);
    if (mut->norm_id) mut->norm_id->update_running(sid, momentum);
  }
  return out;
}

}  // namespace

template <typename T>
Var<T> repblock_forward_train(Tape<T>& tape, const RepBlockTrainParams<T>& p, Var<T> x) {
  return forward_impl<T>(tape, p, nullptr, x, T(0));
}

template <typename T>
Var<T> repblock_forward_train_batch(Tape<T>& tape, RepBlockTrainParams<T>& p, Var<T> x, T momentum) {
  return forward_impl<T>(tape, p, &p, x, momentum);
}

template <typename T>
Var<T> repblock_forward_fused(Tape<T>& tape, const RepBlockFusedParams<T>& p, Var<T> x) {
  return ops::conv1d(x, tape.param(p.w), std::optional(tape.param(p.b)), {p.stride, 1, 1});
}

template <typename T>
RepBlockFusedParams<T> fuse(const RepBlockTrainParams<T>& p) {
  p.validate();
  const std::size_t co = p.out_channels, ci = p.in_channels;
  Tensor<T> w(Shape{co, ci, 3});
  Tensor<T> b(Shape{co});

  // Folds conv (weights, bias) followed by an optional norm into a scaled
  // kernel and shifted bias.
  auto fold = [&](const Tensor<T>& wk, const Tensor<T>& bk, const std::optional<BranchNorm<T>>& norm,
                  std::size_t k, std::size_t tap_offset) {
    std::vector<T> scale(co, T(1)), shift(co);
    if (norm) {
      scale = norm->folded_scale();
      for (std::size_t o = 0; o < co; ++o)
        shift[o] = norm->beta.value[o] + (bk[o] - norm->running_mean[o]) * scale[o];
    } else {
      for (std::size_t o = 0; o < co; ++o) shift[o] = bk[o];
    }
    for (std::size_t o = 0; o < co; ++o) {
      for (std::size_t i = 0; i < ci; ++i)
        for (std::size_t j = 0; j < k; ++j) w.at(o, i, j + tap_offset) += wk.at(o, i, j) * scale[o];
      b[o] += shift[o];
    }
  };
  fold(p.w3.value, p.b3.value, p.norm3, 3, 0);
  fold(p.w1.value, p.b1.value, p.norm1, 1, 1);  // kernel-1 lands on the center tap
  if (p.has_identity) {
    std::vector<T> scale(co, T(1));
    if (p.norm_id) {
      scale = p.norm_id->folded_scale();
      for (std::size_t o = 0; o < co; ++o)
        b[o] += p.norm_id->beta.value[o] - p.norm_id->running_mean[o] * scale[o];
    }
    for (std::size_t o = 0; o < co; ++o) w.at(o, o, 1) += scale[o];
  }
  RepBlockFusedParams<T> f;
  f.w = Parameter<T>(std::move(w));
  f.b = Parameter<T>(std::move(b));
  f.stride = p.stride;
  return f;
}

template <typename T>
RepBlockTrainParams<T> as_phi_only(const RepBlockFusedParams<T>& f) {
  RepBlockTrainParams<T> p = RepBlockTrainParams<T>::zeros(f.in_channels(), f.out_channels(), f.stride, false);
  p.w3 = Parameter<T>(f.w.value);
  p.b3 = Parameter<T>(f.b.value);
  p.has_identity = false;
  return p;
}

template <typename T>
std::size_t RepBlock<T>::in_channels() const {
  return std::visit([](const auto& p) -> std::size_t {
    if constexpr (std::is_same_v<std::decay_t<decltype(p)>, RepBlockTrainParams<T>>)
      return p.in_channels;
    else
      return p.in_channels();
  }, params);
}

template <typename T>
std::size_t RepBlock<T>::out_channels() const {
  return std::visit([](const auto& p) -> std::size_t {
    if constexpr (std::is_same_v<std::decay_t<decltype(p)>, RepBlockTrainParams<T>>)
      return p.out_channels;
    else
      return p.out_channels();
  }, params);
}

template <typename T>
std::size_t RepBlock<T>::stride() const {
  return std::visit([](const auto& p) { return p.stride; }, params);
}

template <typename T>
std::size_t RepBlock<T>::param_count() const {
  return std::visit([](const auto& p) { return p.param_count(); }, params);
}

template <typename T>
Var<T> RepBlock<T>::forward(Tape<T>& tape, Var<T> x, bool batch_stats) {
  if (!batch_stats) return std::as_const(*this).forward(tape, x);
  auto* train = std::get_if<RepBlockTrainParams<T>>(&params);
  if (!train) throw std::logic_error("batch statistics requested on a fused RepBlock");
  return ops::activation(repblock_forward_train_batch(tape, *train, x), post_activation);
}

template <typename T>
Var<T> RepBlock<T>::forward(Tape<T>& tape, Var<T> x) const {
  Var<T> y = is_fused() ? repblock_forward_fused(tape, std::get<RepBlockFusedParams<T>>(params), x)
                        : repblock_forward_train(tape, std::get<RepBlockTrainParams<T>>(params), x);
  return ops::activation(y, post_activation);
}

template <typename T>
void RepBlock<T>::fuse_in_place() {
  if (is_fused()) throw std::logic_error("RepBlock is already fused");
  params = fuse(std::get<RepBlockTrainParams<T>>(params));
}

#define REPILN_INSTANTIATE(T)                                                                      \
  template struct BranchNorm<T>;                                                                   \
  template struct RepBlockTrainParams<T>;                                                          \
  template struct RepBlock<T>;                                                                     \
  template Var<T> repblock_forward_train(Tape<T>&, const RepBlockTrainParams<T>&, Var<T>);        \
  template Var<T> repblock_forward_train_batch(Tape<T>&, RepBlockTrainParams<T>&, Var<T>, T);     \
  template Var<T> repblock_forward_fused(Tape<T>&, const RepBlockFusedParams<T>&, Var<T>);        \
  template RepBlockFusedParams<T> fuse(const RepBlockTrainParams<T>&);                             \
  template RepBlockTrainParams<T> as_phi_only(const RepBlockFusedParams<T>&);

REPILN_INSTANTIATE(float)
REPILN_INSTANTIATE(double)

}  // namespace repiln
