// SPDX-License-Identifier: Apache-2.0
#pragma once

// The element-wise linear recurrence c_t = c_{t-1} * f_t + u_t that is the
// only sequential part of the qLSTM, computed either step by step or in
// blocks through the carry tensor F.

#include <algorithm>
#include <vector>

#include "lmkit/numerics/graph.hpp"
#include "lmkit/numerics/tensor.hpp"

namespace lmkit {

/// f_block[L x w] -> F[L x (L+1) x w]. Row k is the cell state after local
/// step k; column 0 multiplies the incoming state, column i >= 1 multiplies
/// update u_{i-1}:
///   F[k,0] = f_0 * ... * f_k
///   F[k,i] = f_i * ... * f_k   for 1 <= i <= k   (empty product = 1 at i = k+1)
///   F[k,i] = 0                 for i > k+1
template <typename T>
Tensor<T> build_carry_tensor(const Tensor<T>& f_block) {
  if (f_block.rank() != 2 || f_block.dim(0) == 0) {
    throw Error("build_carry_tensor: expected [L x w] with L >= 1, got " +
                shape_str(f_block.shape()));
  }
  const std::size_t L = f_block.dim(0), w = f_block.dim(1);
  Tensor<T> F(Shape{L, L + 1, w});
  auto at = [&](std::size_t k, std::size_t i) { return F.data() + (k * (L + 1) + i) * w; };
  for (std::size_t k = 0; k < L; ++k) {
    const T* fk = f_block.data() + k * w;
    for (std::size_t i = 0; i <= k; ++i) {
      T* dst = at(k, i);
      if (k == 0 || i == k) {
        std::copy_n(fk, w, dst);  // F[0,0] = f_0 and F[k,k] = f_k
      } else {
        const T* prev = at(k - 1, i);
        for (std::size_t j = 0; j < w; ++j) dst[j] = prev[j] * fk[j];
      }
    }
    std::fill_n(at(k, k + 1), w, T{1});
  }
  return F;
}

namespace recurrence_detail {

// c[b, t0 + k] = F[k,0] c_in + sum_{i=1..k+1} F[k,i] u[b, t0 + i - 1]
template <typename T>
void block_forward(const T* f, const T* u, const T* c_in, T* c, std::size_t L, std::size_t w,
                   Tensor<T>& F_scratch) {
  F_scratch = build_carry_tensor(Tensor<T>(Shape{L, w}, std::vector<T>(f, f + L * w)));
  const T* F = F_scratch.data();
  for (std::size_t k = 0; k < L; ++k) {
    T* ck = c + k * w;
    const T* Fk = F + k * (L + 1) * w;
    for (std::size_t j = 0; j < w; ++j) ck[j] = Fk[j] * c_in[j];
    for (std::size_t i = 1; i <= k + 1; ++i) {
      const T* Fki = Fk + i * w;
      const T* ui = u + (i - 1) * w;
      for (std::size_t j = 0; j < w; ++j) ck[j] += Fki[j] * ui[j];
    }
  }
}

// gc[k] is the total gradient on local cell state k. Accumulates into gf, gu
// and returns the gradient on c_in through g_cin.
template <typename T>
void block_backward(const T* f, const T* u, const T* c_in, const T* gc, T* gf, T* gu, T* g_cin,
                    std::size_t L, std::size_t w) {
  const Tensor<T> Ft = build_carry_tensor(Tensor<T>(Shape{L, w}, std::vector<T>(f, f + L * w)));
  const T* F = Ft.data();
  auto Fat = [&](std::size_t k, std::size_t i) { return F + (k * (L + 1) + i) * w; };
  // gF[k,i] = gc_k * v_i where v_0 = c_in and v_i = u_{i-1}.
  std::vector<T> gF(L * (L + 1) * w, T{0});
  auto gFat = [&](std::size_t k, std::size_t i) { return gF.data() + (k * (L + 1) + i) * w; };
  std::fill_n(g_cin, w, T{0});
  for (std::size_t k = 0; k < L; ++k) {
    const T* g = gc + k * w;
    for (std::size_t i = 0; i <= k + 1; ++i) {
      const T* v = i == 0 ? c_in : u + (i - 1) * w;
      const T* Fki = Fat(k, i);
      T* gv = i == 0 ? g_cin : gu + (i - 1) * w;
      T* gFki = gFat(k, i);
      for (std::size_t j = 0; j < w; ++j) {
        gv[j] += g[j] * Fki[j];
        gFki[j] = g[j] * v[j];
      }
    }
  }
  // Each column is a running product down the rows: P_k = P_{k-1} * f_k,
  // starting from P_{i-1} = 1 (column 0 starts from the empty product before
  // row 0). Reverse each chain.
  std::vector<T> carry(w);
  for (std::size_t i = 0; i <= L; ++i) {
    const std::size_t first = i == 0 ? 0 : i;  // first row whose entry depends on f
    if (first >= L) continue;
    std::fill(carry.begin(), carry.end(), T{0});
    for (std::size_t k = L; k-- > first;) {
      const T* gFki = gFat(k, i);
      const T* fk = f + k * w;
      const T* Pprev = (k == first) ? nullptr : Fat(k - 1, i);
      T* gfk = gf + k * w;
      for (std::size_t j = 0; j < w; ++j) {
        const T tot = gFki[j] + carry[j];
        gfk[j] += tot * (Pprev ? Pprev[j] : T{1});
        carry[j] = tot * fk[j];
      }
    }
  }
}

}  // namespace recurrence_detail

/// c_t = c_{t-1} * f_t + u_t over f, u [(b*s) x w] (batch-major, time within
/// batch) with initial state c0 [b x w]. Returns every c_t, [(b*s) x w].
///
/// block_len <= 1 runs the step-by-step loop. Larger values compute each
/// block of block_len steps at once through the carry tensor and chain the
/// last state of each block into the next; a final short block uses a
/// truncated carry tensor.
template <typename T>
Var<T> linear_recurrence(Var<T> f, Var<T> u, Var<T> c0, std::size_t block_len = 1) {
  const Tensor<T>& fv = f.value();
  const Tensor<T>& uv = u.value();
  const Tensor<T>& cv = c0.value();
  if (fv.rank() != 2 || fv.shape() != uv.shape() || cv.rank() != 2 || cv.cols() != fv.cols() ||
      cv.rows() == 0 || fv.rows() % cv.rows() != 0) {
    throw Error("linear_recurrence: incompatible shapes f " + shape_str(fv.shape()) + ", u " +
                shape_str(uv.shape()) + ", c0 " + shape_str(cv.shape()));
  }
  const std::size_t B = cv.rows(), w = fv.cols(), s = fv.rows() / B;
  const std::size_t L = std::max<std::size_t>(block_len, 1);
  Tensor<T> out(fv.shape());
  if (L == 1) {
    for (std::size_t b = 0; b < B; ++b) {
      const T* prev = cv.data() + b * w;
      for (std::size_t t = 0; t < s; ++t) {
        const std::size_t off = (b * s + t) * w;
        T* c = out.data() + off;
        for (std::size_t j = 0; j < w; ++j) c[j] = prev[j] * fv[off + j] + uv[off + j];
        prev = c;
      }
    }
  } else {
    Tensor<T> scratch;
    for (std::size_t b = 0; b < B; ++b) {
      const T* c_in = cv.data() + b * w;
      for (std::size_t t0 = 0; t0 < s; t0 += L) {
        const std::size_t len = std::min(L, s - t0);
        const std::size_t off = (b * s + t0) * w;
        recurrence_detail::block_forward(fv.data() + off, uv.data() + off, c_in, out.data() + off,
                                         len, w, scratch);
        c_in = out.data() + off + (len - 1) * w;
      }
    }
  }
  return f.graph().record(
      std::move(out), {f, u, c0},
      [f, u, c0, B, s, w, L](Graph<T>& g, Var<T> self, const Tensor<T>& dc) {
        const Tensor<T>& fv = g.value(f);
        const Tensor<T>& uv = g.value(u);
        const Tensor<T>& cv = g.value(c0);
        const Tensor<T>& c = g.value(self);
        Tensor<T> gf(fv.shape()), gu(fv.shape()), gc0(cv.shape());
        std::vector<T> carry(w), gblock, g_cin(w);
        for (std::size_t b = 0; b < B; ++b) {
          std::fill(carry.begin(), carry.end(), T{0});  // gradient arriving from later steps
          auto prev_state = [&](std::size_t t) {
            return t == 0 ? cv.data() + b * w : c.data() + (b * s + t - 1) * w;
          };
          if (L == 1) {
            for (std::size_t t = s; t-- > 0;) {
              const std::size_t off = (b * s + t) * w;
              const T* cp = prev_state(t);
              for (std::size_t j = 0; j < w; ++j) {
                const T tot = dc[off + j] + carry[j];
                gu[off + j] = tot;
                gf[off + j] = tot * cp[j];
                carry[j] = tot * fv[off + j];
              }
            }
          } else {
            const std::size_t nblocks = (s + L - 1) / L;
            for (std::size_t blk = nblocks; blk-- > 0;) {
              const std::size_t t0 = blk * L, len = std::min(L, s - t0);
              const std::size_t off = (b * s + t0) * w;
              gblock.assign(dc.data() + off, dc.data() + off + len * w);
              for (std::size_t j = 0; j < w; ++j) gblock[(len - 1) * w + j] += carry[j];
              recurrence_detail::block_backward(fv.data() + off, uv.data() + off, prev_state(t0),
                                                gblock.data(), gf.data() + off, gu.data() + off,
                                                g_cin.data(), len, w);
              carry = g_cin;
            }
          }
          std::copy(carry.begin(), carry.end(), gc0.data() + b * w);
        }
        g.accumulate(f, gf);
        g.accumulate(u, gu);
        g.accumulate(c0, gc0);
      });
}

}  // namespace lmkit
