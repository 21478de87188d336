// SPDX-License-Identifier: Apache-2.0
#include "repiln/sa_gcu.hpp"

#include <cmath>
#include <stdexcept>

namespace repiln {

template <typename T>
GcuParams<T> GcuParams<T>::init(std::size_t channels, double expansion_ratio, double keep_percent, double alpha,
                                Activation gate_activation, bool pre_norm, Rng& rng) {
  if (channels == 0) throw std::invalid_argument("SA-GCU channels must be positive");
  if (!(expansion_ratio > 0)) throw std::invalid_argument("SA-GCU expansion ratio must be positive");
  GcuParams p;
  p.channels = channels;
  p.hidden_channels = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(expansion_ratio * channels)));
  const std::size_t h = p.hidden_channels;
  p.pre_gate = Conv1dLayer<T>::pointwise(channels, h, rng);
  p.gate_depthwise = Conv1dLayer<T>::depthwise(h, rng);
  p.gate_activation = gate_activation;
  p.pre_value = Conv1dLayer<T>::pointwise(channels, h, rng);
  p.tssa = TssaParams<T>::init(h, keep_percent, alpha, rng);
  p.out = Conv1dLayer<T>::pointwise(h, channels, rng);
  if (pre_norm) p.pre_norm = BranchNorm<T>::identity(channels);
  return p;
}

template <typename T>
void GcuParams<T>::validate() const {
  const std::size_t h = hidden_channels;
  if (h == 0) throw std::invalid_argument("SA-GCU hidden channels must be positive");
  if (pre_gate.in_channels() != channels || pre_gate.out_channels() != h || pre_value.in_channels() != channels ||
      pre_value.out_channels() != h || gate_depthwise.out_channels() != h || gate_depthwise.opt.groups != h ||
      out.in_channels() != h || out.out_channels() != channels || tssa.channels != h)
    throw ShapeError("SA-GCU convolution shapes are inconsistent");
  tssa.validate();
}

template <typename T>
std::size_t GcuParams<T>::param_count() const {
  std::size_t n = pre_gate.param_count() + gate_depthwise.param_count() + pre_value.param_count() +
                  tssa.param_count() + out.param_count();
  if (pre_norm) n += pre_norm->gamma.numel() + pre_norm->beta.numel();
  return n;
}

namespace {

template <typename T>
Var<T> gcu_body(Tape<T>& tape, const GcuParams<T>& p, Var<T> x) {
  Var<T> g = sa_gcu_gate(tape, p, x);
  Var<T> v = tssa_forward(tape, p.tssa, p.pre_value.forward(tape, x));
  return p.out.forward(tape, ops::mul(g, v));
}

}  // namespace

template <typename T>
Var<T> sa_gcu_gate(Tape<T>& tape, const GcuParams<T>& p, Var<T> x) {
  return ops::activation(p.gate_depthwise.forward(tape, p.pre_gate.forward(tape, x)), p.gate_activation);
}

template <typename T>
Var<T> sa_gcu_forward(Tape<T>& tape, const GcuParams<T>& p, Var<T> x) {
  if (p.pre_norm)
    x = ops::batch_norm(x, tape.param(p.pre_norm->gamma), tape.param(p.pre_norm->beta), p.pre_norm->running_mean,
                        p.pre_norm->running_var, p.pre_norm->eps,
                        static_cast<ops::NormStats<T>*>(nullptr));
  return gcu_body(tape, p, x);
}

template <typename T>
Var<T> sa_gcu_forward_batch(Tape<T>& tape, GcuParams<T>& p, Var<T> x, T momentum) {
  if (!p.pre_norm) return gcu_body(tape, p, x);
  auto& n = *p.pre_norm;
  ops::NormStats<T> s;
  x = ops::batch_norm(x, tape.param(n.gamma), tape.param(n.beta), n.running_mean, n.running_var, n.eps, &s);
  n.update_running(s, momentum);
  return gcu_body(tape, p, x);
}

std::size_t sa_gcu_macs(std::size_t channels, std::size_t hidden_channels, std::size_t length) {
  const std::size_t c = channels, h = hidden_channels, l = length;
  const std::size_t gate = (c * h + 3 * h) * l;
  const std::size_t value = c * h * l + tssa_macs(h, l);
  const std::size_t product = h * l;
  const std::size_t out = h * c * l;
  return gate + value + product + out;
}

#define REPILN_INSTANTIATE(T)                                                        \
  template struct GcuParams<T>;                                                      \
  template Var<T> sa_gcu_gate(Tape<T>&, const GcuParams<T>&, Var<T>);                \
  template Var<T> sa_gcu_forward(Tape<T>&, const GcuParams<T>&, Var<T>);             \
  template Var<T> sa_gcu_forward_batch(Tape<T>&, GcuParams<T>&, Var<T>, T);

REPILN_INSTANTIATE(float)
REPILN_INSTANTIATE(double)

}  // namespace repiln
