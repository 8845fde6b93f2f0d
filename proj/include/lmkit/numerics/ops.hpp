// SPDX-License-Identifier: Apache-2.0
#pragma once

// Differentiable primitives over Graph. Each op computes its forward value
// eagerly and records a closure implementing its exact reverse-mode rule.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "lmkit/numerics/graph.hpp"
#include "lmkit/numerics/kernels.hpp"
#include "lmkit/numerics/tensor.hpp"

namespace lmkit::ops {

using lmkit::TokenId;

inline constexpr double kLayerNormEps = 1e-5;

namespace detail {

// b may broadcast over a only along leading axes: b's shape must equal a
// suffix of a's shape.
inline bool trailing_broadcastable(const Shape& a, const Shape& b) {
  if (b.size() > a.size()) return false;
  return std::equal(b.rbegin(), b.rend(), a.rbegin());
}

inline void require_broadcast(const char* op, const Shape& a, const Shape& b) {
  if (!trailing_broadcastable(a, b)) {
    throw Error(std::string(op) + ": shape " + shape_str(b) +
                " does not broadcast onto " + shape_str(a) +
                " (only trailing-dimension broadcast is allowed)");
  }
}

// Sums a gradient of a's shape down to b's (suffix) shape.
template <typename T>
Tensor<T> reduce_to(const Tensor<T>& g, const Shape& target) {
  Tensor<T> out(target);
  const std::size_t inner = out.size();
  for (std::size_t i = 0; i < g.size(); ++i) out[i % inner] += g[i];
  return out;
}

}  // namespace detail

/// c = a * b for a[... x k], b[k x n]; leading axes of a are treated as rows.
template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  if (av.rank() < 2 || bv.rank() != 2 || av.cols() != bv.dim(0)) {
    throw Error("matmul: inner extents do not match for " + shape_str(av.shape()) +
                " and " + shape_str(bv.shape()));
  }
  const std::size_t m = av.rows(), k = av.cols(), n = bv.dim(1);
  Shape out_shape = av.shape();
  out_shape.back() = n;
  Tensor<T> out(out_shape);
  kernels::gemm_nn(m, k, n, av.data(), bv.data(), out.data());
  return a.graph().record(
      std::move(out), {a, b}, [a, b, m, k, n](Graph<T>& g, Var<T>, const Tensor<T>& dc) {
        if (g.requires_grad(a)) {
          Tensor<T>& da = g.grad_buffer(a);
          kernels::gemm_nt(m, n, k, dc.data(), g.value(b).data(), da.data());
        }
        if (g.requires_grad(b)) {
          Tensor<T>& db = g.grad_buffer(b);
          kernels::gemm_tn(k, m, n, g.value(a).data(), dc.data(), db.data());
        }
      });
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  detail::require_broadcast("add", a.shape(), b.shape());
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  Tensor<T> out(av.shape());
  const std::size_t inner = bv.size();
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] + bv[i % inner];
  return a.graph().record(std::move(out), {a, b},
                          [a, b](Graph<T>& g, Var<T>, const Tensor<T>& dc) {
                            g.accumulate(a, dc);
                            if (g.requires_grad(b)) {
                              g.accumulate(b, detail::reduce_to(dc, g.value(b).shape()));
                            }
                          });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  detail::require_broadcast("mul", a.shape(), b.shape());
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  Tensor<T> out(av.shape());
  const std::size_t inner = bv.size();
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] * bv[i % inner];
  return a.graph().record(
      std::move(out), {a, b}, [a, b, inner](Graph<T>& g, Var<T>, const Tensor<T>& dc) {
        const Tensor<T>& av = g.value(a);
        const Tensor<T>& bv = g.value(b);
        if (g.requires_grad(a)) {
          Tensor<T>& da = g.grad_buffer(a);
          for (std::size_t i = 0; i < dc.size(); ++i) da[i] += dc[i] * bv[i % inner];
        }
        if (g.requires_grad(b)) {
          Tensor<T>& db = g.grad_buffer(b);
          for (std::size_t i = 0; i < dc.size(); ++i) db[i % inner] += dc[i] * av[i];
        }
      });
}

template <typename T>
Var<T> scale(Var<T> a, T s) {
  const Tensor<T>& av = a.value();
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] * s;
  return a.graph().record(std::move(out), {a},
                          [a, s](Graph<T>& g, Var<T>, const Tensor<T>& dc) {
                            Tensor<T>& da = g.grad_buffer(a);
                            for (std::size_t i = 0; i < dc.size(); ++i) da[i] += dc[i] * s;
                          });
}

template <typename T>
Var<T> sigmoid(Var<T> x) {
  const Tensor<T>& xv = x.value();
  Tensor<T> out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = T{1} / (T{1} + std::exp(-xv[i]));
  return x.graph().record(std::move(out), {x},
                          [x](Graph<T>& g, Var<T> self, const Tensor<T>& dc) {
                            const Tensor<T>& s = g.value(self);
                            Tensor<T>& dx = g.grad_buffer(x);
                            for (std::size_t i = 0; i < dc.size(); ++i)
                              dx[i] += dc[i] * s[i] * (T{1} - s[i]);
                          });
}

template <typename T>
Var<T> tanh(Var<T> x) {
  const Tensor<T>& xv = x.value();
  Tensor<T> out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = std::tanh(xv[i]);
  return x.graph().record(std::move(out), {x},
                          [x](Graph<T>& g, Var<T> self, const Tensor<T>& dc) {
                            const Tensor<T>& t = g.value(self);
                            Tensor<T>& dx = g.grad_buffer(x);
                            for (std::size_t i = 0; i < dc.size(); ++i)
                              dx[i] += dc[i] * (T{1} - t[i] * t[i]);
                          });
}

template <typename T>
Var<T> relu(Var<T> x) {
  const Tensor<T>& xv = x.value();
  Tensor<T> out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] > T{0} ? xv[i] : T{0};
  return x.graph().record(std::move(out), {x},
                          [x](Graph<T>& g, Var<T>, const Tensor<T>& dc) {
                            const Tensor<T>& xv = g.value(x);
                            Tensor<T>& dx = g.grad_buffer(x);
                            for (std::size_t i = 0; i < dc.size(); ++i)
                              if (xv[i] > T{0}) dx[i] += dc[i];
                          });
}

enum class Elementwise { kAdd, kMul, kSigmoid, kTanh, kRelu };

/// Dispatch form of the pointwise primitives.
template <typename T>
Var<T> elementwise(Elementwise op, Var<T> a) {
  switch (op) {
    case Elementwise::kSigmoid: return sigmoid(a);
    case Elementwise::kTanh: return tanh(a);
    case Elementwise::kRelu: return relu(a);
    default: throw Error("elementwise: binary op needs two operands");
  }
}

template <typename T>
Var<T> elementwise(Elementwise op, Var<T> a, Var<T> b) {
  switch (op) {
    case Elementwise::kAdd: return add(a, b);
    case Elementwise::kMul: return mul(a, b);
    default: throw Error("elementwise: unary op given two operands");
  }
}

/// Softmax over the last axis with max subtraction. Rows may contain -inf
/// entries as long as each row has at least one finite value.
template <typename T>
Var<T> softmax_rows(Var<T> x) {
  const Tensor<T>& xv = x.value();
  const std::size_t n = xv.cols(), rows = xv.rows();
  Tensor<T> out(xv.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = xv.data() + r * n;
    T* o = out.data() + r * n;
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, in[j]);
    T sum{0};
    for (std::size_t j = 0; j < n; ++j) {
      o[j] = std::exp(in[j] - mx);
      sum += o[j];
    }
    for (std::size_t j = 0; j < n; ++j) o[j] /= sum;
  }
  return x.graph().record(
      std::move(out), {x}, [x, n, rows](Graph<T>& g, Var<T> self, const Tensor<T>& dc) {
        const Tensor<T>& y = g.value(self);
        Tensor<T>& dx = g.grad_buffer(x);
        for (std::size_t r = 0; r < rows; ++r) {
          const T* yr = y.data() + r * n;
          const T* gr = dc.data() + r * n;
          T dot{0};
          for (std::size_t j = 0; j < n; ++j) dot += yr[j] * gr[j];
          T* dr = dx.data() + r * n;
          for (std::size_t j = 0; j < n; ++j) dr[j] += yr[j] * (gr[j] - dot);
        }
      });
}

/// Per-row normalisation to zero mean / unit variance (biased variance,
/// epsilon inside the root) followed by gain and bias over the last axis.
template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gain, Var<T> bias) {
  const Tensor<T>& xv = x.value();
  const std::size_t d = xv.cols(), rows = xv.rows();
  if (d < 2) throw Error("layer_norm: last axis must have at least 2 elements");
  if (gain.shape() != Shape{d} || bias.shape() != Shape{d}) {
    throw Error("layer_norm: gain/bias must be [" + std::to_string(d) + "], got " +
                shape_str(gain.shape()) + " and " + shape_str(bias.shape()));
  }
  const T eps = static_cast<T>(kLayerNormEps);
  Tensor<T> out(xv.shape());
  Tensor<T> xhat(xv.shape());
  std::vector<T> inv_std(rows);
  const Tensor<T>& gv = gain.value();
  const Tensor<T>& bv = bias.value();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = xv.data() + r * d;
    T mean{0};
    for (std::size_t j = 0; j < d; ++j) mean += in[j];
    mean /= static_cast<T>(d);
    T var{0};
    for (std::size_t j = 0; j < d; ++j) var += (in[j] - mean) * (in[j] - mean);
    var /= static_cast<T>(d);
    const T is = T{1} / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const T h = (in[j] - mean) * is;
      xhat[r * d + j] = h;
      out[r * d + j] = h * gv[j] + bv[j];
    }
  }
  return x.graph().record(
      std::move(out), {x, gain, bias},
      [x, gain, bias, d, rows, xhat = std::move(xhat), inv_std = std::move(inv_std)](
          Graph<T>& g, Var<T>, const Tensor<T>& dc) {
        const Tensor<T>& gv = g.value(gain);
        if (g.requires_grad(gain) || g.requires_grad(bias)) {
          Tensor<T> dg(Shape{d}), db(Shape{d});
          for (std::size_t i = 0; i < dc.size(); ++i) {
            dg[i % d] += dc[i] * xhat[i];
            db[i % d] += dc[i];
          }
          g.accumulate(gain, dg);
          g.accumulate(bias, db);
        }
        if (!g.requires_grad(x)) return;
        Tensor<T>& dx = g.grad_buffer(x);
        const T inv_d = T{1} / static_cast<T>(d);
        for (std::size_t r = 0; r < rows; ++r) {
          const T* gr = dc.data() + r * d;
          const T* hr = xhat.data() + r * d;
          T sum_dh{0}, sum_dh_h{0};
          for (std::size_t j = 0; j < d; ++j) {
            const T dh = gr[j] * gv[j];
            sum_dh += dh;
            sum_dh_h += dh * hr[j];
          }
          T* dr = dx.data() + r * d;
          for (std::size_t j = 0; j < d; ++j) {
            const T dh = gr[j] * gv[j];
            dr[j] += inv_std[r] * (dh - inv_d * sum_dh - hr[j] * inv_d * sum_dh_h);
          }
        }
      });
}

/// Total (summed) negative log-likelihood of targets under softmax(logits).
/// Optional per-position weights (0/1 masks in practice) scale each term.
template <typename T>
Var<T> cross_entropy(Var<T> logits, std::span<const TokenId> targets,
                     std::span<const T> weights = {}) {
  const Tensor<T>& lv = logits.value();
  const std::size_t V = lv.cols(), rows = lv.rows();
  if (targets.size() != rows) {
    throw Error("cross_entropy: " + std::to_string(targets.size()) +
                " targets for " + std::to_string(rows) + " logit rows");
  }
  if (!weights.empty() && weights.size() != rows) {
    throw Error("cross_entropy: weight count does not match rows");
  }
  Tensor<T> probs(Shape{rows, V});
  T total{0};
  std::vector<TokenId> tgt(targets.begin(), targets.end());
  std::vector<T> w(rows, T{1});
  if (!weights.empty()) w.assign(weights.begin(), weights.end());
  for (std::size_t r = 0; r < rows; ++r) {
    if (tgt[r] >= V) {
      throw Error("cross_entropy: target " + std::to_string(tgt[r]) + " at position " +
                  std::to_string(r) + " is outside [0," + std::to_string(V) + ")");
    }
    const T* in = lv.data() + r * V;
    T* p = probs.data() + r * V;
    T mx = in[0];
    for (std::size_t j = 1; j < V; ++j) mx = std::max(mx, in[j]);
    T sum{0};
    for (std::size_t j = 0; j < V; ++j) {
      p[j] = std::exp(in[j] - mx);
      sum += p[j];
    }
    const T inv = T{1} / sum;
    for (std::size_t j = 0; j < V; ++j) p[j] *= inv;
    if (w[r] != T{0}) total += w[r] * (std::log(sum) + mx - in[tgt[r]]);
  }
  return logits.graph().record(
      Tensor<T>::scalar(total), {logits},
      [logits, V, rows, probs = std::move(probs), tgt = std::move(tgt), w = std::move(w)](
          Graph<T>& g, Var<T>, const Tensor<T>& dc) {
        Tensor<T>& dl = g.grad_buffer(logits);
        const T up = dc[0];
        for (std::size_t r = 0; r < rows; ++r) {
          if (w[r] == T{0}) continue;
          const T s = up * w[r];
          const T* p = probs.data() + r * V;
          T* d = dl.data() + r * V;
          for (std::size_t j = 0; j < V; ++j) d[j] += s * p[j];
          d[tgt[r]] -= s;
        }
      });
}

/// Row gather from an embedding table [V x d].
template <typename T>
Var<T> embedding(Var<T> table, std::span<const TokenId> ids) {
  const Tensor<T>& tv = table.value();
  if (tv.rank() != 2) throw Error("embedding: table must be rank 2");
  const std::size_t V = tv.dim(0), d = tv.dim(1);
  Tensor<T> out(Shape{ids.size(), d});
  std::vector<TokenId> idv(ids.begin(), ids.end());
  for (std::size_t r = 0; r < idv.size(); ++r) {
    if (idv[r] >= V) {
      throw Error("embedding: id " + std::to_string(idv[r]) + " at position " +
                  std::to_string(r) + " exceeds table size " + std::to_string(V));
    }
    std::copy_n(tv.data() + idv[r] * d, d, out.data() + r * d);
  }
  return table.graph().record(std::move(out), {table},
                              [table, d, idv = std::move(idv)](Graph<T>& g, Var<T>,
                                                               const Tensor<T>& dc) {
                                Tensor<T>& dt = g.grad_buffer(table);
                                for (std::size_t r = 0; r < idv.size(); ++r) {
                                  T* dst = dt.data() + idv[r] * d;
                                  const T* src = dc.data() + r * d;
                                  for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
                                }
                              });
}

template <typename T>
Var<T> reshape(Var<T> x, Shape shape) {
  Tensor<T> out = x.value().reshaped(std::move(shape));
  return x.graph().record(std::move(out), {x},
                          [x](Graph<T>& g, Var<T>, const Tensor<T>& dc) {
                            Tensor<T>& dx = g.grad_buffer(x);
                            for (std::size_t i = 0; i < dc.size(); ++i) dx[i] += dc[i];
                          });
}

/// Sum of all elements, as a one-element node.
template <typename T>
Var<T> sum(Var<T> x) {
  T total{0};
  for (T v : x.value().values()) total += v;
  return x.graph().record(Tensor<T>::scalar(total), {x},
                          [x](Graph<T>& g, Var<T>, const Tensor<T>& dc) {
                            Tensor<T>& dx = g.grad_buffer(x);
                            for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dc[0];
                          });
}

/// [(b*s) x (h*dh)] -> [(b*h) x s x dh]
template <typename T>
Var<T> split_heads(Var<T> x, std::size_t batch, std::size_t seq, std::size_t heads) {
  const Tensor<T>& xv = x.value();
  const std::size_t width = xv.cols();
  if (xv.rows() != batch * seq || width % heads != 0) {
    throw Error("split_heads: cannot split " + shape_str(xv.shape()) + " into batch " +
                std::to_string(batch) + ", seq " + std::to_string(seq) + ", heads " +
                std::to_string(heads));
  }
  const std::size_t dh = width / heads;
  auto index = [=](std::size_t b, std::size_t t, std::size_t h, std::size_t j) {
    return std::pair{(b * seq + t) * width + h * dh + j, ((b * heads + h) * seq + t) * dh + j};
  };
  Tensor<T> out(Shape{batch * heads, seq, dh});
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t t = 0; t < seq; ++t)
      for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t j = 0; j < dh; ++j) {
          auto [src, dst] = index(b, t, h, j);
          out[dst] = xv[src];
        }
  return x.graph().record(std::move(out), {x},
                          [x, index, batch, seq, heads, dh](Graph<T>& g, Var<T>,
                                                            const Tensor<T>& dc) {
                            Tensor<T>& dx = g.grad_buffer(x);
                            for (std::size_t b = 0; b < batch; ++b)
                              for (std::size_t t = 0; t < seq; ++t)
                                for (std::size_t h = 0; h < heads; ++h)
                                  for (std::size_t j = 0; j < dh; ++j) {
                                    auto [src, dst] = index(b, t, h, j);
                                    dx[src] += dc[dst];
                                  }
                          });
}

/// [(b*h) x s x dh] -> [(b*s) x (h*dh)]
template <typename T>
Var<T> merge_heads(Var<T> x, std::size_t batch, std::size_t heads) {
  const Tensor<T>& xv = x.value();
  if (xv.rank() != 3 || xv.dim(0) != batch * heads) {
    throw Error("merge_heads: unexpected shape " + shape_str(xv.shape()));
  }
  const std::size_t seq = xv.dim(1), dh = xv.dim(2), width = heads * dh;
  auto index = [=](std::size_t b, std::size_t t, std::size_t h, std::size_t j) {
    return std::pair{((b * heads + h) * seq + t) * dh + j, (b * seq + t) * width + h * dh + j};
  };
  Tensor<T> out(Shape{batch * seq, width});
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t t = 0; t < seq; ++t)
      for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t j = 0; j < dh; ++j) {
          auto [src, dst] = index(b, t, h, j);
          out[dst] = xv[src];
        }
  return x.graph().record(std::move(out), {x},
                          [x, index, batch, seq, heads, dh](Graph<T>& g, Var<T>,
                                                            const Tensor<T>& dc) {
                            Tensor<T>& dx = g.grad_buffer(x);
                            for (std::size_t b = 0; b < batch; ++b)
                              for (std::size_t t = 0; t < seq; ++t)
                                for (std::size_t h = 0; h < heads; ++h)
                                  for (std::size_t j = 0; j < dh; ++j) {
                                    auto [src, dst] = index(b, t, h, j);
                                    dx[src] += dc[dst];
                                  }
                          });
}

/// Batched product: a[B x m x k] * b[B x k x n], or with transpose_b,
/// a[B x m x k] * b[B x n x k]^T.
template <typename T>
Var<T> bmm(Var<T> a, Var<T> b, bool transpose_b = false) {
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  if (av.rank() != 3 || bv.rank() != 3 || av.dim(0) != bv.dim(0) ||
      av.dim(2) != (transpose_b ? bv.dim(2) : bv.dim(1))) {
    throw Error("bmm: incompatible shapes " + shape_str(av.shape()) + " and " +
                shape_str(bv.shape()));
  }
  const std::size_t B = av.dim(0), m = av.dim(1), k = av.dim(2);
  const std::size_t n = transpose_b ? bv.dim(1) : bv.dim(2);
  Tensor<T> out(Shape{B, m, n});
  for (std::size_t i = 0; i < B; ++i) {
    const T* ap = av.data() + i * m * k;
    const T* bp = bv.data() + i * k * n;
    T* cp = out.data() + i * m * n;
    if (transpose_b) kernels::gemm_nt(m, k, n, ap, bp, cp);
    else kernels::gemm_nn(m, k, n, ap, bp, cp);
  }
  return a.graph().record(
      std::move(out), {a, b},
      [a, b, B, m, k, n, transpose_b](Graph<T>& g, Var<T>, const Tensor<T>& dc) {
        const Tensor<T>& av = g.value(a);
        const Tensor<T>& bv = g.value(b);
        for (std::size_t i = 0; i < B; ++i) {
          const T* ap = av.data() + i * m * k;
          const T* bp = bv.data() + i * k * n;
          const T* gp = dc.data() + i * m * n;
          if (g.requires_grad(a)) {
            T* da = g.grad_buffer(a).data() + i * m * k;
            // transpose_b: dA = dC * B;  else dA = dC * B^T
            if (transpose_b) kernels::gemm_nn(m, n, k, gp, bp, da);
            else kernels::gemm_nt(m, n, k, gp, bp, da);
          }
          if (g.requires_grad(b)) {
            T* db = g.grad_buffer(b).data() + i * k * n;
            // transpose_b: dB = dC^T * A;  else dB = A^T * dC
            if (transpose_b) kernels::gemm_tn(n, m, k, gp, ap, db);
            else kernels::gemm_tn(k, m, n, ap, gp, db);
          }
        }
      });
}

/// Sets entries strictly above the diagonal of every trailing [s x s] slice
/// to -inf. Masked entries receive no gradient.
template <typename T>
Var<T> causal_mask(Var<T> x) {
  const Tensor<T>& xv = x.value();
  if (xv.rank() < 2 || xv.dim(xv.rank() - 1) != xv.dim(xv.rank() - 2)) {
    throw Error("causal_mask: trailing axes must be square, got " + shape_str(xv.shape()));
  }
  const std::size_t s = xv.cols();
  Tensor<T> out = xv;
  const T ninf = -std::numeric_limits<T>::infinity();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const std::size_t col = i % s, row = (i / s) % s;
    if (col > row) out[i] = ninf;
  }
  return x.graph().record(std::move(out), {x},
                          [x, s](Graph<T>& g, Var<T>, const Tensor<T>& dc) {
                            Tensor<T>& dx = g.grad_buffer(x);
                            for (std::size_t i = 0; i < dc.size(); ++i) {
                              const std::size_t col = i % s, row = (i / s) % s;
                              if (col <= row) dx[i] += dc[i];
                            }
                          });
}

/// Head-wise product with a block-diagonal matrix: x[n x (h*dh)] times
/// w[h x dh x dh] applied independently per head.
template <typename T>
Var<T> blockdiag_matmul(Var<T> x, Var<T> w) {
  const Tensor<T>& xv = x.value();
  const Tensor<T>& wv = w.value();
  if (wv.rank() != 3 || wv.dim(1) != wv.dim(2) || xv.cols() != wv.dim(0) * wv.dim(1)) {
    throw Error("blockdiag_matmul: incompatible shapes " + shape_str(xv.shape()) +
                " and " + shape_str(wv.shape()));
  }
  const std::size_t n = xv.rows(), heads = wv.dim(0), dh = wv.dim(1), width = heads * dh;
  Tensor<T> out(xv.shape());
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t h = 0; h < heads; ++h) {
      const T* xr = xv.data() + r * width + h * dh;
      const T* wh = wv.data() + h * dh * dh;
      T* o = out.data() + r * width + h * dh;
      for (std::size_t p = 0; p < dh; ++p)
        for (std::size_t j = 0; j < dh; ++j) o[j] += xr[p] * wh[p * dh + j];
    }
  return x.graph().record(
      std::move(out), {x, w},
      [x, w, n, heads, dh, width](Graph<T>& g, Var<T>, const Tensor<T>& dc) {
        const Tensor<T>& xv = g.value(x);
        const Tensor<T>& wv = g.value(w);
        const bool gx = g.requires_grad(x), gw = g.requires_grad(w);
        Tensor<T>* dx = gx ? &g.grad_buffer(x) : nullptr;
        Tensor<T>* dw = gw ? &g.grad_buffer(w) : nullptr;
        for (std::size_t r = 0; r < n; ++r)
          for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t off = r * width + h * dh;
            const T* wh = wv.data() + h * dh * dh;
            for (std::size_t p = 0; p < dh; ++p)
              for (std::size_t j = 0; j < dh; ++j) {
                const T gc = dc[off + j];
                if (gx) (*dx)[off + p] += gc * wh[p * dh + j];
                if (gw) (*dw)[h * dh * dh + p * dh + j] += gc * xv[off + p];
              }
          }
      });
}

/// x * w + b for x[n x k], w[k x m], b[m].
template <typename T>
Var<T> linear(Var<T> x, Var<T> w, Var<T> b) {
  return add(matmul(x, w), b);
}

/// Rows [begin, begin + count) of a rank-2 tensor.
template <typename T>
Var<T> slice_rows(Var<T> x, std::size_t begin, std::size_t count) {
  const Tensor<T>& xv = x.value();
  if (xv.rank() != 2 || begin + count > xv.dim(0)) {
    throw Error("slice_rows: rows [" + std::to_string(begin) + ", " +
                std::to_string(begin + count) + ") outside " + shape_str(xv.shape()));
  }
  const std::size_t w = xv.cols();
  Tensor<T> out(Shape{count, w},
                std::vector<T>(xv.data() + begin * w, xv.data() + (begin + count) * w));
  return x.graph().record(std::move(out), {x},
                          [x, begin, w](Graph<T>& g, Var<T>, const Tensor<T>& dc) {
                            T* dx = g.grad_buffer(x).data() + begin * w;
                            for (std::size_t i = 0; i < dc.size(); ++i) dx[i] += dc[i];
                          });
}

/// Step t of a time-major-within-batch layout: x[(b*s) x w] -> [b x w].
template <typename T>
Var<T> time_step(Var<T> x, std::size_t batch, std::size_t t) {
  const Tensor<T>& xv = x.value();
  const std::size_t w = xv.cols();
  if (xv.rank() != 2 || batch == 0 || xv.rows() % batch != 0 || t >= xv.rows() / batch) {
    throw Error("time_step: step " + std::to_string(t) + " with batch " + std::to_string(batch) +
                " outside " + shape_str(xv.shape()));
  }
  const std::size_t seq = xv.rows() / batch;
  Tensor<T> out(Shape{batch, w});
  for (std::size_t b = 0; b < batch; ++b)
    std::copy_n(xv.data() + (b * seq + t) * w, w, out.data() + b * w);
  return x.graph().record(std::move(out), {x},
                          [x, batch, seq, t, w](Graph<T>& g, Var<T>, const Tensor<T>& dc) {
                            Tensor<T>& dx = g.grad_buffer(x);
                            for (std::size_t b = 0; b < batch; ++b)
                              for (std::size_t j = 0; j < w; ++j)
                                dx[(b * seq + t) * w + j] += dc[b * w + j];
                          });
}

/// Inverse of time_step over all steps: s tensors [b x w] -> [(b*s) x w].
template <typename T>
Var<T> stack_steps(const std::vector<Var<T>>& steps) {
  if (steps.empty()) throw Error("stack_steps: no steps");
  const Shape& s0 = steps[0].shape();
  if (s0.size() != 2) throw Error("stack_steps: steps must be rank 2, got " + shape_str(s0));
  const std::size_t batch = s0[0], w = s0[1], seq = steps.size();
  Tensor<T> out(Shape{batch * seq, w});
  for (std::size_t t = 0; t < seq; ++t) {
    if (steps[t].shape() != s0) {
      throw Error("stack_steps: step " + std::to_string(t) + " has shape " +
                  shape_str(steps[t].shape()) + ", expected " + shape_str(s0));
    }
    const T* src = steps[t].value().data();
    for (std::size_t b = 0; b < batch; ++b)
      std::copy_n(src + b * w, w, out.data() + (b * seq + t) * w);
  }
  return steps[0].graph().record(
      std::move(out), std::span<const Var<T>>(steps),
      [steps, batch, seq, w](Graph<T>& g, Var<T>, const Tensor<T>& dc) {
        for (std::size_t t = 0; t < seq; ++t) {
          if (!g.requires_grad(steps[t])) continue;
          T* dx = g.grad_buffer(steps[t]).data();
          for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t j = 0; j < w; ++j) dx[b * w + j] += dc[(b * seq + t) * w + j];
        }
      });
}

}  // namespace lmkit::ops
