// SPDX-License-Identifier: Apache-2.0
#include "repiln/tssa.hpp"

#include <cmath>
#include <stdexcept>

namespace repiln {

template <typename T>
TssaParams<T> TssaParams<T>::init(std::size_t channels, double keep_percent, double alpha, Rng& rng) {
  TssaParams p;
  p.channels = channels;
  p.q = PointDepthwise<T>::init(channels, rng);
  p.k = PointDepthwise<T>::init(channels, rng);
  p.v = PointDepthwise<T>::init(channels, rng);
  p.alpha = alpha > 0 ? alpha : std::sqrt(static_cast<double>(channels));
  p.keep_percent = keep_percent;
  p.validate();
  return p;
}

template <typename T>
void TssaParams<T>::validate() const {
  if (!(alpha > 0)) throw std::invalid_argument("TSSA alpha must be positive");
  if (!(keep_percent > 0 && keep_percent <= 100)) throw std::invalid_argument("TSSA keep percentage must lie in (0, 100]");
  for (const auto* pd : {&q, &k, &v}) {
    if (pd->point.in_channels() != channels || pd->point.out_channels() != channels || pd->point.kernel() != 1)
      throw ShapeError("TSSA point conv must map C -> C with kernel 1");
    if (pd->depth.opt.groups != channels || pd->depth.kernel() != 3 || pd->depth.out_channels() != channels)
      throw ShapeError("TSSA depthwise conv must have groups == channels and kernel 3");
  }
}

std::size_t retained_count(double keep_percent, std::size_t length) {
  if (!(keep_percent > 0 && keep_percent <= 100)) throw std::invalid_argument("keep percentage must lie in (0, 100]");
  // e * L / 100 rather than (e / 100) * L keeps integral products exact.
  const double raw = std::ceil(keep_percent * static_cast<double>(length) / 100.0 - 1e-9);
  const auto k = static_cast<std::size_t>(std::max(1.0, raw));
  return std::min(k, length);
}

template <typename T>
QkvProjection<T> project_qkv(Tape<T>& tape, const TssaParams<T>& p, Var<T> x) {
  return {p.q.forward(tape, x), p.k.forward(tape, x), p.v.forward(tape, x)};
}

template <typename T>
Var<T> temporal_scores(Var<T> q, Var<T> k, double alpha) {
  if (q.shape() != k.shape() || q.shape().size() != 2)
    throw ShapeError("temporal_scores: " + shape_str(q.shape()) + " vs " + shape_str(k.shape()));
  if (!(alpha > 0)) throw std::invalid_argument("alpha must be positive");
  return ops::scale(ops::matmul(ops::transpose(q), k), static_cast<T>(1.0 / alpha));
}

template <typename T>
Var<T> max_e_mask(Var<T> scores, double keep_percent) {
  return ops::topk_mask_rows(scores, retained_count(keep_percent, scores.shape().back()));
}

template <typename T>
Var<T> tssa_attend(Var<T> q, Var<T> k, Var<T> v, double alpha, double keep_percent) {
  if (v.shape() != q.shape()) throw ShapeError("tssa: value shape differs from query shape");
  Var<T> scores = temporal_scores(q, k, alpha);
  Var<T> attn = ops::softmax_rows(max_e_mask(scores, keep_percent));
  return ops::matmul(v, ops::transpose(attn));
}

template <typename T>
Var<T> tssa_forward(Tape<T>& tape, const TssaParams<T>& p, Var<T> x) {
  const auto qkv = project_qkv(tape, p, x);
  if (x.shape().size() == 2) return tssa_attend(qkv.q, qkv.k, qkv.v, p.alpha, p.keep_percent);
  std::vector<Var<T>> outs;
  for (std::size_t b = 0; b < x.shape()[0]; ++b)
    outs.push_back(tssa_attend(ops::select(qkv.q, b), ops::select(qkv.k, b), ops::select(qkv.v, b), p.alpha,
                               p.keep_percent));
  return ops::stack(outs);
}

std::size_t tssa_macs(std::size_t channels, std::size_t length) {
  const std::size_t projections = 3 * (channels * channels + 3 * channels) * length;
  const std::size_t contractions = 2 * channels * length * length;
  return projections + contractions;
}

#define REPILN_INSTANTIATE(T)                                                                   \
  template struct TssaParams<T>;                                                                \
  template QkvProjection<T> project_qkv(Tape<T>&, const TssaParams<T>&, Var<T>);                \
  template Var<T> temporal_scores(Var<T>, Var<T>, double);                                      \
  template Var<T> max_e_mask(Var<T>, double);                                                   \
  template Var<T> tssa_attend(Var<T>, Var<T>, Var<T>, double, double);                          \
  template Var<T> tssa_forward(Tape<T>&, const TssaParams<T>&, Var<T>);

REPILN_INSTANTIATE(float)
REPILN_INSTANTIATE(double)

}  // namespace repiln
