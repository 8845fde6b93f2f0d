// SPDX-License-Identifier: Apache-2.0
#pragma once

// Forward passes for the three families on top of the autodiff graph. All
// activations are [(batch*seq) x width] with time varying fastest within a
// batch lane.

#include <cmath>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "lmkit/models/config.hpp"
#include "lmkit/models/params.hpp"
#include "lmkit/models/recurrence.hpp"
#include "lmkit/numerics/ops.hpp"

namespace lmkit {

/// Per-layer cell state (and LSTM hidden state), one [batch x width] tensor
/// per layer.
template <typename T>
struct RecurrentState {
  std::vector<Tensor<T>> c;
  std::vector<Tensor<T>> h;  // LSTM only

  static RecurrentState zeros(const ModelConfig& cfg, std::size_t batch) {
    RecurrentState s;
    if (cfg.family == Family::kGpt) return s;
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
      s.c.emplace_back(Shape{batch, cfg.width()});
      if (cfg.family == Family::kLstm) s.h.emplace_back(Shape{batch, cfg.width()});
    }
    return s;
  }

  bool empty() const { return c.empty(); }
  bool all_finite() const {
    for (const auto& t : c)
      if (!t.all_finite()) return false;
    for (const auto& t : h)
      if (!t.all_finite()) return false;
    return true;
  }
};

/// Parameters placed on a graph as leaves, addressable by name.
template <typename T>
class BoundParams {
 public:
  BoundParams(Graph<T>& g, const ModelParams<T>& p, bool requires_grad = true) : params_(&p) {
    vars_.reserve(p.size());
    for (const auto& t : p.tensors()) vars_.push_back(g.leaf(t, requires_grad));
  }
  /// Reuses vars already on a graph, one per tensor of p in order.
  BoundParams(const ModelParams<T>& p, std::vector<Var<T>> vars)
      : params_(&p), vars_(std::move(vars)) {
    if (vars_.size() != p.size()) {
      throw Error("bound params: " + std::to_string(vars_.size()) + " vars for " +
                  std::to_string(p.size()) + " tensors");
    }
  }
  Var<T> operator[](const std::string& name) const { return vars_[params_->index(name)]; }
  const std::vector<Var<T>>& vars() const { return vars_; }

  /// Gradients after graph.backward(), in parameter order.
  std::vector<Tensor<T>> grads(const Graph<T>& g) const {
    std::vector<Tensor<T>> out;
    out.reserve(vars_.size());
    for (auto v : vars_) out.push_back(g.grad(v));
    return out;
  }

 private:
  const ModelParams<T>* params_;
  std::vector<Var<T>> vars_;
};

/// Gate weights of one (multi-head) LSTM or qLSTM cell. Heads are column
/// blocks of the [d_model x width] matrices; u* are [heads x d_head x d_head]
/// and stay unset for the qLSTM.
template <typename T>
struct CellVars {
  Var<T> wf, wi, wz, wo, bf, bi, bz, bo;
  Var<T> uf, ui, uz, uo;
  Var<T> wh, bh;

  static CellVars bind(const BoundParams<T>& p, const std::string& prefix, bool recurrent) {
    CellVars v;
    v.wf = p[prefix + "wf"], v.wi = p[prefix + "wi"], v.wz = p[prefix + "wz"], v.wo = p[prefix + "wo"];
    v.bf = p[prefix + "bf"], v.bi = p[prefix + "bi"], v.bz = p[prefix + "bz"], v.bo = p[prefix + "bo"];
    if (recurrent) {
      v.uf = p[prefix + "uf"], v.ui = p[prefix + "ui"], v.uz = p[prefix + "uz"], v.uo = p[prefix + "uo"];
    }
    v.wh = p[prefix + "wh"], v.bh = p[prefix + "bh"];
    return v;
  }
};

// ---------------------------------------------------------------- LSTM

/// One step of the classic multi-head LSTM given precomputed input
/// projections xw_* = x_t W_* + b_* ([batch x width]).
template <typename T>
std::pair<Var<T>, Var<T>> lstm_cell_step(Var<T> xw_f, Var<T> xw_i, Var<T> xw_z, Var<T> xw_o,
                                         Var<T> h_prev, Var<T> c_prev, const CellVars<T>& cell) {
  using namespace ops;
  auto f = sigmoid(add(xw_f, blockdiag_matmul(h_prev, cell.uf)));
  auto i = sigmoid(add(xw_i, blockdiag_matmul(h_prev, cell.ui)));
  auto z = tanh(add(xw_z, blockdiag_matmul(h_prev, cell.uz)));
  auto o = sigmoid(add(xw_o, blockdiag_matmul(h_prev, cell.uo)));
  auto c = add(mul(c_prev, f), mul(i, z));
  auto h = mul(o, tanh(c));
  return {h, c};
}

/// (h_t, c_t) from x_t [batch x d_model] and the previous state.
template <typename T>
std::pair<Var<T>, Var<T>> lstm_cell_forward(Var<T> x_t, Var<T> h_prev, Var<T> c_prev,
                                            const CellVars<T>& cell) {
  using namespace ops;
  return lstm_cell_step(linear(x_t, cell.wf, cell.bf), linear(x_t, cell.wi, cell.bi),
                        linear(x_t, cell.wz, cell.bz), linear(x_t, cell.wo, cell.bo), h_prev,
                        c_prev, cell);
}

/// LSTM sublayer over a whole sequence; returns W_h h for every step and
/// writes the final (h, c) to h_out / c_out when given.
template <typename T>
Var<T> lstm_sublayer(Var<T> x, const CellVars<T>& cell, std::size_t batch, const Tensor<T>& h0,
                     const Tensor<T>& c0, Tensor<T>* h_out = nullptr, Tensor<T>* c_out = nullptr) {
  using namespace ops;
  Graph<T>& g = x.graph();
  const std::size_t seq = x.value().rows() / batch;
  auto pf = linear(x, cell.wf, cell.bf), pi = linear(x, cell.wi, cell.bi);
  auto pz = linear(x, cell.wz, cell.bz), po = linear(x, cell.wo, cell.bo);
  Var<T> h = g.constant(h0), c = g.constant(c0);
  std::vector<Var<T>> hs;
  hs.reserve(seq);
  for (std::size_t t = 0; t < seq; ++t) {
    std::tie(h, c) = lstm_cell_step(time_step(pf, batch, t), time_step(pi, batch, t),
                                    time_step(pz, batch, t), time_step(po, batch, t), h, c, cell);
    hs.push_back(h);
  }
  if (h_out) *h_out = h.value();
  if (c_out) *c_out = c.value();
  return linear(stack_steps(hs), cell.wh, cell.bh);
}

// ---------------------------------------------------------------- qLSTM

/// qLSTM sublayer: gates from x only, then the linear recurrence over
/// u = i * z, h = o * tanh(c), output W_h h. block_len <= 1 runs the
/// recurrence step by step, otherwise in carry-tensor blocks.
template <typename T>
Var<T> qlstm_sublayer(Var<T> x, const CellVars<T>& cell, std::size_t batch, const Tensor<T>& c0,
                      std::size_t block_len, Tensor<T>* c_out = nullptr) {
  using namespace ops;
  Graph<T>& g = x.graph();
  auto f = sigmoid(linear(x, cell.wf, cell.bf));
  auto i = sigmoid(linear(x, cell.wi, cell.bi));
  auto z = tanh(linear(x, cell.wz, cell.bz));
  auto o = sigmoid(linear(x, cell.wo, cell.bo));
  auto c = linear_recurrence(f, mul(i, z), g.constant(c0), block_len);
  if (c_out) {
    const Tensor<T>& cv = c.value();
    const std::size_t seq = cv.rows() / batch, w = cv.cols();
    *c_out = Tensor<T>(Shape{batch, w});
    for (std::size_t b = 0; b < batch; ++b)
      std::copy_n(cv.data() + (b * seq + seq - 1) * w, w, c_out->data() + b * w);
  }
  return linear(mul(o, tanh(c)), cell.wh, cell.bh);
}

template <typename T>
Var<T> qlstm_forward_sequential(Var<T> x, const CellVars<T>& cell, std::size_t batch,
                                const Tensor<T>& c0, Tensor<T>* c_out = nullptr) {
  return qlstm_sublayer(x, cell, batch, c0, 1, c_out);
}

template <typename T>
Var<T> qlstm_forward_block(Var<T> x, const CellVars<T>& cell, std::size_t batch,
                           const Tensor<T>& c0, std::size_t block_len, Tensor<T>* c_out = nullptr) {
  if (block_len == 0) throw Error("qlstm_forward_block: block length must be positive");
  return qlstm_sublayer(x, cell, batch, c0, block_len, c_out);
}

// ---------------------------------------------------------------- attention

/// Causal multi-head scaled dot-product attention on x [(b*s) x d_model].
template <typename T>
Var<T> attention_sublayer(Var<T> x, const BoundParams<T>& p, const std::string& pre,
                          std::size_t batch, std::size_t heads) {
  using namespace ops;
  const std::size_t seq = x.value().rows() / batch;
  auto q = split_heads(linear(x, p[pre + "wq"], p[pre + "bq"]), batch, seq, heads);
  auto k = split_heads(linear(x, p[pre + "wk"], p[pre + "bk"]), batch, seq, heads);
  auto v = split_heads(linear(x, p[pre + "wv"], p[pre + "bv"]), batch, seq, heads);
  const T inv = T{1} / std::sqrt(static_cast<T>(q.value().cols()));
  auto scores = causal_mask(scale(bmm(q, k, true), inv));
  auto ctx = merge_heads(bmm(softmax_rows(scores), v), batch, heads);
  return linear(ctx, p[pre + "wo"], p[pre + "bo"]);
}

// ---------------------------------------------------------------- full model

struct ForwardOptions {
  /// Overrides the config's block length for qLSTM (0 keeps the config).
  std::size_t block_len = 0;
};

/// Logits [(batch*seq) x V] for inputs laid out as batch lanes of seq ids.
/// When `state` is non-null, recurrent families start from it and overwrite
/// it with the final state; otherwise they start from zeros.
template <typename T>
Var<T> forward(Graph<T>& g, const BoundParams<T>& p, const ModelConfig& cfg,
               std::span<const TokenId> inputs, std::size_t batch,
               RecurrentState<T>* state = nullptr, ForwardOptions opt = {}) {
  using namespace ops;
  if (batch == 0 || inputs.size() % batch != 0 || inputs.empty()) {
    throw Error("forward: " + std::to_string(inputs.size()) + " ids do not split into " +
                std::to_string(batch) + " lanes");
  }
  const std::size_t seq = inputs.size() / batch, d = cfg.d_model;
  if (cfg.family == Family::kGpt && seq > cfg.seq_len) {
    throw Error("forward: sequence length " + std::to_string(seq) +
                " exceeds the position table (" + std::to_string(cfg.seq_len) + ")");
  }
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (inputs[i] >= cfg.vocab_size) {
      throw Error("forward: id " + std::to_string(inputs[i]) + " at position " + std::to_string(i) +
                  " exceeds vocabulary size " + std::to_string(cfg.vocab_size));
    }
  }
  RecurrentState<T> local;
  if (cfg.family != Family::kGpt) {
    if (!state || state->empty()) {
      local = RecurrentState<T>::zeros(cfg, batch);
      if (state) *state = local;
    }
    if (!state) state = &local;
    if (state->c.size() != cfg.n_layers || state->c[0].shape() != Shape{batch, cfg.width()}) {
      throw Error("forward: recurrent state does not match config and batch " +
                  std::to_string(batch));
    }
  }

  auto x = embedding(p["tok_emb"], inputs);
  if (cfg.family == Family::kGpt) {
    auto pos = slice_rows(p["pos_emb"], 0, seq);
    x = reshape(add(reshape(x, Shape{batch, seq, d}), pos), Shape{batch * seq, d});
  }
  const std::size_t block = opt.block_len ? opt.block_len : cfg.block_len;
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const std::string pre = "l" + std::to_string(l) + ".";
    auto a = layer_norm(x, p[pre + "ln1.g"], p[pre + "ln1.b"]);
    Var<T> y;
    switch (cfg.family) {
      case Family::kGpt:
        y = attention_sublayer(a, p, pre + "attn.", batch, cfg.n_heads);
        break;
      case Family::kQlstm: {
        Tensor<T> c_next;
        y = qlstm_sublayer(a, CellVars<T>::bind(p, pre + "cell.", false), batch, state->c[l], block,
                           &c_next);
        state->c[l] = std::move(c_next);
        break;
      }
      case Family::kLstm: {
        Tensor<T> h_next, c_next;
        y = lstm_sublayer(a, CellVars<T>::bind(p, pre + "cell.", true), batch, state->h[l],
                          state->c[l], &h_next, &c_next);
        state->h[l] = std::move(h_next);
        state->c[l] = std::move(c_next);
        break;
      }
    }
    x = add(x, y);
    auto m = layer_norm(x, p[pre + "ln2.g"], p[pre + "ln2.b"]);
    x = add(x, linear(relu(linear(m, p[pre + "mlp.w1"], p[pre + "mlp.b1"])), p[pre + "mlp.w2"],
                      p[pre + "mlp.b2"]));
  }
  x = layer_norm(x, p["ln_f.g"], p["ln_f.b"]);
  return matmul(x, p["head"]);
}

/// Convenience for inference: logits as a plain tensor.
template <typename T>
Tensor<T> logits(const ModelParams<T>& params, const ModelConfig& cfg,
                 std::span<const TokenId> inputs, std::size_t batch,
                 RecurrentState<T>* state = nullptr) {
  Graph<T> g;
  BoundParams<T> p(g, params, false);
  return forward(g, p, cfg, inputs, batch, state).value();
}

}  // namespace lmkit
