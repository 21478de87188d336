// SPDX-License-Identifier: Apache-2.0
#include "repiln/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <stdexcept>

namespace repiln {

// ---------------------------------------------------------------------------
// Tape

template <typename T>
Var<T> Tape<T>::constant(Tensor<T> value) {
  nodes_.push_back(Node{std::move(value), {}, false, nullptr, {}});
  return {this, nodes_.size() - 1};
}

template <typename T>
Var<T> Tape<T>::leaf(Tensor<T> value, bool requires_grad) {
  nodes_.push_back(Node{std::move(value), {}, requires_grad && grad_enabled_, nullptr, {}});
  return {this, nodes_.size() - 1};
}

template <typename T>
Var<T> Tape<T>::param(const Parameter<T>& p) {
  nodes_.push_back(Node{p.value, {}, grad_enabled_, grad_enabled_ ? &p : nullptr, {}});
  return {this, nodes_.size() - 1};
}

template <typename T>
Var<T> Tape<T>::record(Tensor<T> value, const std::vector<Var<T>>& inputs, BackwardFn backward) {
  bool rg = false;
  if (grad_enabled_)
    for (const auto& v : inputs) {
      if (v.tape != this) throw std::invalid_argument("operand recorded on a different tape");
      rg = rg || nodes_[v.id].requires_grad;
    }
  nodes_.push_back(Node{std::move(value), {}, rg, nullptr, rg ? std::move(backward) : BackwardFn{}});
  return {this, nodes_.size() - 1};
}

template <typename T>
Tensor<T> Tape<T>::grad(Var<T> v) const {
  const Node& n = nodes_.at(v.id);
  if (n.grad.empty()) return Tensor<T>(n.value.shape());
  return n.grad;
}

template <typename T>
void Tape<T>::accumulate(std::size_t id, const Tensor<T>& g) {
  Node& n = nodes_.at(id);
  if (!n.requires_grad) return;
  if (g.shape() != n.value.shape())
    throw ShapeError("gradient shape " + shape_str(g.shape()) + " for value " + shape_str(n.value.shape()));
  if (n.grad.empty()) {
    n.grad = g;
    return;
  }
  for (std::size_t i = 0; i < g.size(); ++i) n.grad[i] += g[i];
}

template <typename T>
void Tape<T>::backward(Var<T> loss) {
  if (backward_done_) throw std::logic_error("backward called twice without reset_grads()");
  if (loss.tape != this) throw std::invalid_argument("loss recorded on a different tape");
  Node& root = nodes_.at(loss.id);
  if (root.value.size() != 1)
    throw ShapeError("backward needs a scalar loss, got " + shape_str(root.value.shape()));
  if (!root.requires_grad) throw std::logic_error("loss is detached from every requires-grad leaf");
  backward_done_ = true;
  root.grad = Tensor<T>(root.value.shape(), T(1));
  for (std::size_t id = loss.id + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (n.grad.empty()) continue;
    if (n.backward) n.backward(*this, n.grad);
    if (n.param) {
      if (n.param->grad.shape() != n.param->value.shape()) n.param->zero_grad();
      for (std::size_t i = 0; i < n.grad.size(); ++i) n.param->grad[i] += n.grad[i];
    }
  }
}

template <typename T>
void Tape<T>::reset_grads() {
  for (auto& n : nodes_) n.grad = Tensor<T>();
  backward_done_ = false;
}

// ---------------------------------------------------------------------------
// Activations

std::string to_string(Activation a) {
  switch (a) {
    case Activation::Identity: return "identity";
    case Activation::ReLU: return "relu";
    case Activation::Sigmoid: return "sigmoid";
    case Activation::GELU: return "gelu";
  }
  return "?";
}

Activation parse_activation(const std::string& s) {
  if (s == "identity" || s == "none") return Activation::Identity;
  if (s == "relu") return Activation::ReLU;
  if (s == "sigmoid") return Activation::Sigmoid;
  if (s == "gelu") return Activation::GELU;
  throw std::invalid_argument("unknown activation: " + s);
}

template <typename T>
T apply_activation(Activation kind, T x) {
  switch (kind) {
    case Activation::Identity: return x;
    case Activation::ReLU: return x > T(0) ? x : T(0);
    case Activation::Sigmoid: return T(1) / (T(1) + std::exp(-x));
    case Activation::GELU: return T(0.5) * x * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
  }
  return x;
}

namespace {

template <typename T>
T activation_derivative(Activation kind, T x, T y) {
  switch (kind) {
    case Activation::Identity: return T(1);
    case Activation::ReLU: return x > T(0) ? T(1) : T(0);
    case Activation::Sigmoid: return y * (T(1) - y);
    case Activation::GELU: {
      const T cdf = T(0.5) * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
      const T pdf = std::exp(T(-0.5) * x * x) * std::numbers::inv_sqrtpi_v<T> / std::numbers::sqrt2_v<T>;
      return cdf + x * pdf;
    }
  }
  return T(1);
}

void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a != b) throw ShapeError(std::string(op) + ": " + shape_str(a) + " vs " + shape_str(b));
}

}  // namespace

std::size_t conv1d_output_length(std::size_t length, std::size_t kernel, const Conv1dOptions& opt) {
  if (opt.stride == 0) throw std::invalid_argument("conv1d stride must be >= 1");
  const std::size_t padded = length + 2 * opt.padding;
  if (padded < kernel) throw ShapeError("conv1d produces zero-length output");
  return (padded - kernel) / opt.stride + 1;
}

namespace ops {

// ---------------------------------------------------------------------------
// conv1d

template <typename T>
Var<T> conv1d(Var<T> x, Var<T> w, std::optional<Var<T>> bias, const Conv1dOptions& opt) {
  const Tensor<T>& xv = x.value();
  const Tensor<T>& wv = w.value();
  const bool batched = xv.rank() == 3;
  if (xv.rank() != 2 && !batched) throw ShapeError("conv1d input must be [C,L] or [B,C,L], got " + shape_str(xv.shape()));
  if (wv.rank() != 3) throw ShapeError("conv1d weight must be [C_out,C_in/groups,K], got " + shape_str(wv.shape()));
  const std::size_t B = batched ? xv.dim(0) : 1;
  const std::size_t Cin = xv.dim(batched ? 1 : 0);
  const std::size_t L = xv.dim(batched ? 2 : 1);
  const std::size_t Cout = wv.dim(0), Cg = wv.dim(1), K = wv.dim(2);
  const std::size_t G = opt.groups;
  if (G == 0 || Cin % G || Cout % G) throw ShapeError("conv1d channels not divisible by groups");
  if (Cin / G != Cg)
    throw ShapeError("conv1d weight " + shape_str(wv.shape()) + " incompatible with input " + shape_str(xv.shape()));
  if (K % 2 == 0) throw ShapeError("conv1d kernel size must be odd");
  if (bias && (bias->value().rank() != 1 || bias->value().dim(0) != Cout))
    throw ShapeError("conv1d bias must be [C_out]");
  const std::size_t Lout = conv1d_output_length(L, K, opt);
  const std::size_t S = opt.stride, P = opt.padding, CoutG = Cout / G;

  Tensor<T> out(batched ? Shape{B, Cout, Lout} : Shape{Cout, Lout});
  // valid t range for tap j: 0 <= t*S + j - P < L
  auto t_range = [=](std::size_t j, std::size_t& t0, std::size_t& t1) {
    t0 = j >= P ? 0 : (P - j + S - 1) / S;
    const std::ptrdiff_t last = static_cast<std::ptrdiff_t>(L) - 1 + static_cast<std::ptrdiff_t>(P) - static_cast<std::ptrdiff_t>(j);
    t1 = last < 0 ? 0 : std::min(Lout, static_cast<std::size_t>(last) / S + 1);
  };
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t o = 0; o < Cout; ++o) {
      T* dst = &out[(b * Cout + o) * Lout];
      if (bias) std::fill(dst, dst + Lout, bias->value()[o]);
      const std::size_t gbase = (o / CoutG) * Cg;
      for (std::size_t i = 0; i < Cg; ++i) {
        const T* src = &xv[(b * Cin + gbase + i) * L];
        for (std::size_t j = 0; j < K; ++j) {
          const T wij = wv[(o * Cg + i) * K + j];
          std::size_t t0, t1;
          t_range(j, t0, t1);
          for (std::size_t t = t0; t < t1; ++t) dst[t] += wij * src[t * S + j - P];
        }
      }
    }

  std::vector<Var<T>> inputs{x, w};
  if (bias) inputs.push_back(*bias);
  const std::size_t xid = x.id, wid = w.id;
  const std::optional<std::size_t> bid = bias ? std::optional<std::size_t>(bias->id) : std::nullopt;
  return x.tape->record(std::move(out), inputs, [=](Tape<T>& tape, const Tensor<T>& g) {
    const Tensor<T>& xv = tape.value(xid);
    const Tensor<T>& wv = tape.value(wid);
    const bool need_x = tape.requires_grad(xid), need_w = tape.requires_grad(wid);
    Tensor<T> dx(xv.shape()), dw(wv.shape());
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t o = 0; o < Cout; ++o) {
        const T* go = &g[(b * Cout + o) * Lout];
        const std::size_t gbase = (o / CoutG) * Cg;
        for (std::size_t i = 0; i < Cg; ++i) {
          const std::size_t row = (b * Cin + gbase + i) * L;
          for (std::size_t j = 0; j < K; ++j) {
            const std::size_t widx = (o * Cg + i) * K + j;
            std::size_t t0, t1;
            t_range(j, t0, t1);
            if (need_x) {
              const T wij = wv[widx];
              for (std::size_t t = t0; t < t1; ++t) dx[row + t * S + j - P] += wij * go[t];
            }
            if (need_w) {
              T acc = 0;
              for (std::size_t t = t0; t < t1; ++t) acc += go[t] * xv[row + t * S + j - P];
              dw[widx] += acc;
            }
          }
        }
      }
    if (need_x) tape.accumulate(xid, dx);
    if (need_w) tape.accumulate(wid, dw);
    if (bid && tape.requires_grad(*bid)) {
      Tensor<T> db(Shape{Cout});
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t o = 0; o < Cout; ++o)
          for (std::size_t t = 0; t < Lout; ++t) db[o] += g[(b * Cout + o) * Lout + t];
      tape.accumulate(*bid, db);
    }
  });
}

// ---------------------------------------------------------------------------
// matrix ops

namespace {

template <typename T>
Tensor<T> matmul_raw(const Tensor<T>& a, const Tensor<T>& b) {
  const std::size_t M = a.dim(0), N = a.dim(1), P = b.dim(1);
  Tensor<T> out(Shape{M, P});
  for (std::size_t i = 0; i < M; ++i)
    for (std::size_t k = 0; k < N; ++k) {
      const T aik = a[i * N + k];
      if (aik == T(0)) continue;
      const T* brow = &b[k * P];
      T* orow = &out[i * P];
      for (std::size_t j = 0; j < P; ++j) orow[j] += aik * brow[j];
    }
  return out;
}

template <typename T>
Tensor<T> transpose_raw(const Tensor<T>& a) {
  const std::size_t M = a.dim(0), N = a.dim(1);
  Tensor<T> out(Shape{N, M});
  for (std::size_t i = 0; i < M; ++i)
    for (std::size_t j = 0; j < N; ++j) out[j * M + i] = a[i * N + j];
  return out;
}

}  // namespace

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0))
    throw ShapeError("matmul: " + shape_str(av.shape()) + " x " + shape_str(bv.shape()));
  const std::size_t aid = a.id, bid = b.id;
  return a.tape->record(matmul_raw(av, bv), {a, b}, [=](Tape<T>& tape, const Tensor<T>& g) {
    if (tape.requires_grad(aid)) tape.accumulate(aid, matmul_raw(g, transpose_raw(tape.value(bid))));
    if (tape.requires_grad(bid)) tape.accumulate(bid, matmul_raw(transpose_raw(tape.value(aid)), g));
  });
}

template <typename T>
Var<T> transpose(Var<T> a) {
  if (a.value().rank() != 2) throw ShapeError("transpose expects a matrix");
  const std::size_t aid = a.id;
  return a.tape->record(transpose_raw(a.value()), {a}, [=](Tape<T>& tape, const Tensor<T>& g) {
    tape.accumulate(aid, transpose_raw(g));
  });
}

// ---------------------------------------------------------------------------
// softmax / masking

template <typename T>
Var<T> softmax_rows(Var<T> s) {
  const Tensor<T>& sv = s.value();
  const std::size_t N = sv.shape().back();
  const std::size_t rows = sv.size() / N;
  const T sentinel = masked_sentinel<T>();
  Tensor<T> out(sv.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = &sv[r * N];
    T* y = &out[r * N];
    T m = sentinel;
    bool any = false;
    for (std::size_t j = 0; j < N; ++j)
      if (in[j] != sentinel) {
        m = any ? std::max(m, in[j]) : in[j];
        any = true;
      }
    if (!any) throw std::domain_error("softmax_rows: row " + std::to_string(r) + " is fully masked");
    T total = 0;
    for (std::size_t j = 0; j < N; ++j) {
      y[j] = in[j] == sentinel ? T(0) : std::exp(in[j] - m);
      total += y[j];
    }
    for (std::size_t j = 0; j < N; ++j) y[j] /= total;
  }
  const std::size_t sid = s.id;
  const std::size_t yid = s.tape->size();  // id the output is about to receive
  return s.tape->record(std::move(out), {s}, [=](Tape<T>& tape, const Tensor<T>& g) {
    const Tensor<T>& y = tape.value(yid);
    Tensor<T> dx(y.shape());
    for (std::size_t r = 0; r < rows; ++r) {
      T dot = 0;
      for (std::size_t j = 0; j < N; ++j) dot += g[r * N + j] * y[r * N + j];
      for (std::size_t j = 0; j < N; ++j) dx[r * N + j] = y[r * N + j] * (g[r * N + j] - dot);
    }
    tape.accumulate(sid, dx);
  });
}

template <typename T>
Var<T> topk_mask_rows(Var<T> s, std::size_t k) {
  const Tensor<T>& sv = s.value();
  const std::size_t N = sv.shape().back();
  const std::size_t rows = sv.size() / N;
  if (k == 0) throw std::invalid_argument("topk_mask_rows: k must be >= 1");
  k = std::min(k, N);
  Tensor<T> out(sv.shape(), masked_sentinel<T>());
  std::vector<std::uint8_t> keep(sv.size(), 0);
  std::vector<std::size_t> idx(N);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = &sv[r * N];
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                      [in](std::size_t a, std::size_t b) { return in[a] > in[b] || (in[a] == in[b] && a < b); });
    for (std::size_t j = 0; j < k; ++j) {
      keep[r * N + idx[j]] = 1;
      out[r * N + idx[j]] = in[idx[j]];
    }
  }
  const std::size_t sid = s.id;
  return s.tape->record(std::move(out), {s}, [=, keep = std::move(keep)](Tape<T>& tape, const Tensor<T>& g) {
    Tensor<T> dx(g.shape());
    for (std::size_t i = 0; i < g.size(); ++i)
      if (keep[i]) dx[i] = g[i];
    tape.accumulate(sid, dx);
  });
}

// ---------------------------------------------------------------------------
// elementwise

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  require_same_shape(a.shape(), b.shape(), "add");
  Tensor<T> out = a.value();
  const Tensor<T>& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  const std::size_t aid = a.id, bid = b.id;
  return a.tape->record(std::move(out), {a, b}, [=](Tape<T>& tape, const Tensor<T>& g) {
    tape.accumulate(aid, g);
    tape.accumulate(bid, g);
  });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  require_same_shape(a.shape(), b.shape(), "sub");
  Tensor<T> out = a.value();
  const Tensor<T>& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  const std::size_t aid = a.id, bid = b.id;
  return a.tape->record(std::move(out), {a, b}, [=](Tape<T>& tape, const Tensor<T>& g) {
    tape.accumulate(aid, g);
    if (tape.requires_grad(bid)) {
      Tensor<T> neg = g;
      for (auto& v : neg.storage()) v = -v;
      tape.accumulate(bid, neg);
    }
  });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  require_same_shape(a.shape(), b.shape(), "mul");
  Tensor<T> out = a.value();
  const Tensor<T>& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  const std::size_t aid = a.id, bid = b.id;
  return a.tape->record(std::move(out), {a, b}, [=](Tape<T>& tape, const Tensor<T>& g) {
    if (tape.requires_grad(aid)) {
      Tensor<T> da = g;
      const Tensor<T>& bv = tape.value(bid);
      for (std::size_t i = 0; i < da.size(); ++i) da[i] *= bv[i];
      tape.accumulate(aid, da);
    }
    if (tape.requires_grad(bid)) {
      Tensor<T> db = g;
      const Tensor<T>& av = tape.value(aid);
      for (std::size_t i = 0; i < db.size(); ++i) db[i] *= av[i];
      tape.accumulate(bid, db);
    }
  });
}

template <typename T>
Var<T> scale(Var<T> a, T c) {
  Tensor<T> out = a.value();
  for (auto& v : out.storage()) v *= c;
  const std::size_t aid = a.id;
  return a.tape->record(std::move(out), {a}, [=](Tape<T>& tape, const Tensor<T>& g) {
    Tensor<T> da = g;
    for (auto& v : da.storage()) v *= c;
    tape.accumulate(aid, da);
  });
}

template <typename T>
Var<T> activation(Var<T> a, Activation kind) {
  if (kind == Activation::Identity) return a;
  Tensor<T> out = a.value();
  for (auto& v : out.storage()) v = apply_activation(kind, v);
  const std::size_t aid = a.id;
  const std::size_t yid = a.tape->size();
  return a.tape->record(std::move(out), {a}, [=](Tape<T>& tape, const Tensor<T>& g) {
    const Tensor<T>& xv = tape.value(aid);
    const Tensor<T>& yv = tape.value(yid);
    Tensor<T> dx(g.shape());
    for (std::size_t i = 0; i < g.size(); ++i) dx[i] = g[i] * activation_derivative(kind, xv[i], yv[i]);
    tape.accumulate(aid, dx);
  });
}

// ---------------------------------------------------------------------------
// reductions

template <typename T>
Var<T> sum(Var<T> a) {
  T total = 0;
  for (T v : a.value().data()) total += v;
  const std::size_t aid = a.id;
  const Shape shape = a.shape();
  return a.tape->record(Tensor<T>::scalar(total), {a}, [=](Tape<T>& tape, const Tensor<T>& g) {
    tape.accumulate(aid, Tensor<T>(shape, g[0]));
  });
}

template <typename T>
Var<T> mse_loss(Var<T> pred, Var<T> target) {
  require_same_shape(pred.shape(), target.shape(), "mse_loss");
  const Tensor<T>& p = pred.value();
  const Tensor<T>& y = target.value();
  T total = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const T d = p[i] - y[i];
    total += d * d;
  }
  const T n = static_cast<T>(p.size());
  const std::size_t pid = pred.id, tid = target.id;
  return pred.tape->record(Tensor<T>::scalar(total / n), {pred, target}, [=](Tape<T>& tape, const Tensor<T>& g) {
    const Tensor<T>& p = tape.value(pid);
    const Tensor<T>& y = tape.value(tid);
    Tensor<T> dp(p.shape());
    for (std::size_t i = 0; i < p.size(); ++i) dp[i] = g[0] * T(2) * (p[i] - y[i]) / n;
    tape.accumulate(pid, dp);
    if (tape.requires_grad(tid)) {
      for (auto& v : dp.storage()) v = -v;
      tape.accumulate(tid, dp);
    }
  });
}

template <typename T>
Var<T> mean_last(Var<T> x) {
  const Tensor<T>& xv = x.value();
  if (xv.rank() < 2) throw ShapeError("mean_last expects rank >= 2");
  const std::size_t L = xv.shape().back();
  Shape out_shape(xv.shape().begin(), xv.shape().end() - 1);
  Tensor<T> out(out_shape);
  for (std::size_t r = 0; r < out.size(); ++r) {
    T acc = 0;
    for (std::size_t t = 0; t < L; ++t) acc += xv[r * L + t];
    out[r] = acc / static_cast<T>(L);
  }
  const std::size_t xid = x.id;
  const Shape in_shape = xv.shape();
  return x.tape->record(std::move(out), {x}, [=](Tape<T>& tape, const Tensor<T>& g) {
    Tensor<T> dx(in_shape);
    for (std::size_t r = 0; r < g.size(); ++r)
      for (std::size_t t = 0; t < L; ++t) dx[r * L + t] = g[r] / static_cast<T>(L);
    tape.accumulate(xid, dx);
  });
}

template <typename T>
Var<T> linear(Var<T> x, Var<T> w, Var<T> bias) {
  const Tensor<T>& xv = x.value();
  const Tensor<T>& wv = w.value();
  const bool batched = xv.rank() == 2;
  if (xv.rank() != 1 && !batched) throw ShapeError("linear input must be [N] or [B,N]");
  const std::size_t B = batched ? xv.dim(0) : 1;
  const std::size_t N = xv.shape().back();
  if (wv.rank() != 2 || wv.dim(1) != N)
    throw ShapeError("linear weight " + shape_str(wv.shape()) + " vs input " + shape_str(xv.shape()));
  const std::size_t M = wv.dim(0);
  if (bias.value().shape() != Shape{M}) throw ShapeError("linear bias must be [M]");
  Tensor<T> out(batched ? Shape{B, M} : Shape{M});
  const Tensor<T>& bv = bias.value();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t m = 0; m < M; ++m) {
      T acc = bv[m];
      for (std::size_t n = 0; n < N; ++n) acc += wv[m * N + n] * xv[b * N + n];
      out[b * M + m] = acc;
    }
  const std::size_t xid = x.id, wid = w.id, bid = bias.id;
  return x.tape->record(std::move(out), {x, w, bias}, [=](Tape<T>& tape, const Tensor<T>& g) {
    const Tensor<T>& xv = tape.value(xid);
    const Tensor<T>& wv = tape.value(wid);
    Tensor<T> dx(xv.shape()), dw(wv.shape()), db(Shape{M});
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t m = 0; m < M; ++m) {
        const T gm = g[b * M + m];
        db[m] += gm;
        for (std::size_t n = 0; n < N; ++n) {
          dx[b * N + n] += gm * wv[m * N + n];
          dw[m * N + n] += gm * xv[b * N + n];
        }
      }
    tape.accumulate(xid, dx);
    tape.accumulate(wid, dw);
    tape.accumulate(bid, db);
  });
}

template <typename T>
Var<T> select(Var<T> x, std::size_t index) {
  const Tensor<T>& xv = x.value();
  if (xv.rank() < 2 || index >= xv.dim(0)) throw ShapeError("select index out of range");
  Shape inner(xv.shape().begin() + 1, xv.shape().end());
  const std::size_t n = shape_numel(inner);
  std::vector<T> data(xv.data().begin() + static_cast<std::ptrdiff_t>(index * n),
                      xv.data().begin() + static_cast<std::ptrdiff_t>((index + 1) * n));
  const std::size_t xid = x.id;
  const Shape full = xv.shape();
  return x.tape->record(Tensor<T>(inner, std::move(data)), {x}, [=](Tape<T>& tape, const Tensor<T>& g) {
    Tensor<T> dx(full);
    std::copy(g.data().begin(), g.data().end(), dx.data().begin() + static_cast<std::ptrdiff_t>(index * n));
    tape.accumulate(xid, dx);
  });
}

template <typename T>
Var<T> stack(const std::vector<Var<T>>& xs) {
  if (xs.empty()) throw ShapeError("stack of nothing");
  const Shape inner = xs.front().shape();
  Shape full{xs.size()};
  full.insert(full.end(), inner.begin(), inner.end());
  Tensor<T> out(full);
  const std::size_t n = shape_numel(inner);
  std::vector<std::size_t> ids;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    require_same_shape(xs[i].shape(), inner, "stack");
    std::copy(xs[i].value().data().begin(), xs[i].value().data().end(),
              out.data().begin() + static_cast<std::ptrdiff_t>(i * n));
    ids.push_back(xs[i].id);
  }
  return xs.front().tape->record(std::move(out), xs, [=](Tape<T>& tape, const Tensor<T>& g) {
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (!tape.requires_grad(ids[i])) continue;
      std::vector<T> part(g.data().begin() + static_cast<std::ptrdiff_t>(i * n),
                          g.data().begin() + static_cast<std::ptrdiff_t>((i + 1) * n));
      tape.accumulate(ids[i], Tensor<T>(inner, std::move(part)));
    }
  });
}

// ---------------------------------------------------------------------------
// batch norm

template <typename T>
Var<T> batch_norm(Var<T> x, Var<T> gamma, Var<T> beta, const Tensor<T>& running_mean,
                  const Tensor<T>& running_var, T eps, NormStats<T>* batch_stats) {
  const Tensor<T>& xv = x.value();
  const bool batched = xv.rank() == 3;
  if (xv.rank() != 2 && !batched) throw ShapeError("batch_norm input must be [C,L] or [B,C,L]");
  const std::size_t B = batched ? xv.dim(0) : 1;
  const std::size_t C = xv.dim(batched ? 1 : 0);
  const std::size_t L = xv.shape().back();
  if (gamma.shape() != Shape{C} || beta.shape() != Shape{C}) throw ShapeError("batch_norm affine must be [C]");
  const std::size_t n = B * L;

  std::vector<T> mean(C), var(C);
  if (batch_stats) {
    for (std::size_t c = 0; c < C; ++c) {
      T acc = 0;
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t t = 0; t < L; ++t) acc += xv[(b * C + c) * L + t];
      mean[c] = acc / static_cast<T>(n);
      T sq = 0;
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t t = 0; t < L; ++t) {
          const T d = xv[(b * C + c) * L + t] - mean[c];
          sq += d * d;
        }
      var[c] = sq / static_cast<T>(n);
    }
    *batch_stats = NormStats<T>{mean, var, n};
  } else {
    if (running_mean.shape() != Shape{C} || running_var.shape() != Shape{C})
      throw ShapeError("batch_norm running stats must be [C]");
    for (std::size_t c = 0; c < C; ++c) {
      mean[c] = running_mean[c];
      var[c] = running_var[c];
      if (!(var[c] > T(0))) throw std::domain_error("batch_norm running variance must be positive");
    }
  }
  std::vector<T> inv_std(C);
  for (std::size_t c = 0; c < C; ++c) inv_std[c] = T(1) / std::sqrt(var[c] + eps);

  const Tensor<T>& gv = gamma.value();
  const Tensor<T>& bv = beta.value();
  Tensor<T> out(xv.shape());
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t t = 0; t < L; ++t) {
        const std::size_t i = (b * C + c) * L + t;
        out[i] = (xv[i] - mean[c]) * inv_std[c] * gv[c] + bv[c];
      }

  const bool train = batch_stats != nullptr;
  const std::size_t xid = x.id, gid = gamma.id, bid = beta.id;
  return x.tape->record(std::move(out), {x, gamma, beta}, [=](Tape<T>& tape, const Tensor<T>& g) {
    const Tensor<T>& xv = tape.value(xid);
    const Tensor<T>& gv = tape.value(gid);
    Tensor<T> dx(xv.shape()), dgamma(Shape{C}), dbeta(Shape{C});
    for (std::size_t c = 0; c < C; ++c) {
      T sum_g = 0, sum_gx = 0;
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t t = 0; t < L; ++t) {
          const std::size_t i = (b * C + c) * L + t;
          const T xhat = (xv[i] - mean[c]) * inv_std[c];
          sum_g += g[i];
          sum_gx += g[i] * xhat;
        }
      dbeta[c] = sum_g;
      dgamma[c] = sum_gx;
      const T k = gv[c] * inv_std[c];
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t t = 0; t < L; ++t) {
          const std::size_t i = (b * C + c) * L + t;
          if (train) {
            const T xhat = (xv[i] - mean[c]) * inv_std[c];
            dx[i] = k * (g[i] - sum_g / static_cast<T>(n) - xhat * sum_gx / static_cast<T>(n));
          } else {
            dx[i] = k * g[i];
          }
        }
    }
    tape.accumulate(xid, dx);
    tape.accumulate(gid, dgamma);
    tape.accumulate(bid, dbeta);
  });
}

}  // namespace ops

// ---------------------------------------------------------------------------
// gradient check

double finite_diff_check(const TapeFunction<double>& f, const Tensor<double>& x, double h,
                         const std::vector<std::size_t>* coords) {
  Tape<double> tape;
  Var<double> xv = tape.leaf(x, true);
  Var<double> y = f(tape, xv);
  if (!y.value().all_finite()) throw std::domain_error("finite_diff_check: non-finite function value");
  Tensor<double> analytic(x.shape());
  if (y.requires_grad()) {
    tape.backward(y);
    analytic = tape.grad(xv);
  } else if (y.value().size() != 1) {
    throw ShapeError("finite_diff_check needs a scalar function");
  }

  auto eval = [&](const Tensor<double>& at) {
    Tape<double> t(false);
    const double v = f(t, t.leaf(at, false)).value().item();
    if (!std::isfinite(v)) throw std::domain_error("finite_diff_check: non-finite function value");
    return v;
  };

  std::vector<std::size_t> all;
  if (!coords) {
    all.resize(x.size());
    std::iota(all.begin(), all.end(), std::size_t{0});
    coords = &all;
  }
  double worst = 0;
  Tensor<double> probe = x;
  for (std::size_t i : *coords) {
    const double orig = probe[i];
    probe[i] = orig + h;
    const double fp = eval(probe);
    probe[i] = orig - h;
    const double fm = eval(probe);
    probe[i] = orig;
    const double numeric = (fp - fm) / (2 * h);
    worst = std::max(worst, std::abs(analytic[i] - numeric) / (std::abs(analytic[i]) + 1e-8));
  }
  return worst;
}

// ---------------------------------------------------------------------------

#define REPILN_INSTANTIATE(T)                                                                         \
  template class Tape<T>;                                                                             \
  template T apply_activation<T>(Activation, T);                                                      \
  template Var<T> ops::conv1d(Var<T>, Var<T>, std::optional<Var<T>>, const Conv1dOptions&);           \
  template Var<T> ops::matmul(Var<T>, Var<T>);                                                        \
  template Var<T> ops::transpose(Var<T>);                                                             \
  template Var<T> ops::softmax_rows(Var<T>);                                                          \
  template Var<T> ops::topk_mask_rows(Var<T>, std::size_t);                                           \
  template Var<T> ops::add(Var<T>, Var<T>);                                                           \
  template Var<T> ops::sub(Var<T>, Var<T>);                                                           \
  template Var<T> ops::mul(Var<T>, Var<T>);                                                           \
  template Var<T> ops::scale(Var<T>, T);                                                              \
  template Var<T> ops::activation(Var<T>, Activation);                                                \
  template Var<T> ops::sum(Var<T>);                                                                   \
  template Var<T> ops::mse_loss(Var<T>, Var<T>);                                                      \
  template Var<T> ops::mean_last(Var<T>);                                                             \
  template Var<T> ops::linear(Var<T>, Var<T>, Var<T>);                                                \
  template Var<T> ops::select(Var<T>, std::size_t);                                                   \
  template Var<T> ops::stack(const std::vector<Var<T>>&);                                             \
  template Var<T> ops::batch_norm(Var<T>, Var<T>, Var<T>, const Tensor<T>&, const Tensor<T>&, T,     \
                                  ops::NormStats<T>*);

REPILN_INSTANTIATE(float)
REPILN_INSTANTIATE(double)

}  // namespace repiln
