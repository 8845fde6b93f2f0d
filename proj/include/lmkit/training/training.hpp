// SPDX-License-Identifier: Apache-2.0
#pragma once

// Adam, cosine learning-rate decay, gradient accumulation, the run log and
// the training loop.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numbers>
#include <optional>
#include <string>
#include <type_traits>
#include <vector>

#include "json.hpp"
#include "lmkit/corpus/batches.hpp"
#include "lmkit/corpus/corpus.hpp"
#include "lmkit/evaluation/evaluation.hpp"
#include "lmkit/models/model.hpp"
#include "lmkit/models/params.hpp"

namespace lmkit {

/// lr0 decayed by decay_factor along a half cosine; steps past the end stay
/// at the floor.
inline double cosine_lr(std::uint64_t step, std::uint64_t total_steps, double lr0 = 6e-4,
                        double decay_factor = 100.0) {
  const double lr_min = lr0 / decay_factor;
  if (total_steps == 0 || step >= total_steps) return lr_min;
  const double frac = static_cast<double>(step) / static_cast<double>(total_steps);
  return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + std::cos(std::numbers::pi * frac));
}

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
struct OptimState {
  std::vector<Tensor<T>> m;
  std::vector<Tensor<T>> v;
  std::uint64_t step = 0;

  static OptimState zeros(const ModelParams<T>& p) {
    OptimState s;
    for (const auto& t : p.tensors()) {
      s.m.emplace_back(t.shape());
      s.v.emplace_back(t.shape());
    }
    return s;
  }
};

template <typename T>
bool all_finite(const std::vector<Tensor<T>>& ts) {
  for (const auto& t : ts)
    for (T x : t.values())
      if (!std::isfinite(x)) return false;
  return true;
}

/// One bias-corrected Adam update. A step whose gradients contain a NaN or
/// infinity is rejected: nothing changes and false is returned.
template <typename T>
bool adam_step(ModelParams<T>& params, const std::vector<Tensor<T>>& grads, OptimState<T>& st,
               double lr, const AdamConfig& cfg = {}) {
  if (grads.size() != params.size() || st.m.size() != params.size()) {
    throw Error("adam: " + std::to_string(grads.size()) + " gradients and " +
                std::to_string(st.m.size()) + " moments for " + std::to_string(params.size()) +
                " parameters");
  }
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (grads[i].shape() != params.tensors()[i].shape()) {
      throw Error("adam: gradient shape " + shape_str(grads[i].shape()) + " for parameter '" +
                  params.names()[i] + "' " + shape_str(params.tensors()[i].shape()));
    }
  }
  if (!all_finite(grads)) return false;
  ++st.step;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.step));
  const T b1 = static_cast<T>(cfg.beta1), b2 = static_cast<T>(cfg.beta2);
  for (std::size_t i = 0; i < grads.size(); ++i) {
    T* p = params.tensors()[i].data();
    T* m = st.m[i].data();
    T* v = st.v[i].data();
    const T* g = grads[i].data();
    for (std::size_t j = 0, n = grads[i].size(); j < n; ++j) {
      m[j] = b1 * m[j] + (T{1} - b1) * g[j];
      v[j] = b2 * v[j] + (T{1} - b2) * g[j] * g[j];
      const double mhat = m[j] / c1, vhat = v[j] / c2;
      p[j] -= static_cast<T>(lr * mhat / (std::sqrt(vhat) + cfg.eps));
    }
  }
  return true;
}

// ------------------------------------------------------------------- run log

struct LogRecord {
  std::uint64_t step = 0;
  std::uint64_t tokens_seen = 0;
  double train_loss = 0.0;
  std::optional<double> eval_metric;         // held-out fast-eval mean loss
  std::optional<double> accelerator_seconds; // tokens seen / reference throughput
  double lr = 0.0;
  std::uint64_t epoch = 0;
};

inline void to_json(nlohmann::json& j, const LogRecord& r) {
  j = nlohmann::json{{"step", r.step},       {"tokens_seen", r.tokens_seen},
                     {"train_loss", r.train_loss}, {"lr", r.lr},
                     {"epoch", r.epoch}};
  j["eval_metric"] = r.eval_metric ? nlohmann::json(*r.eval_metric) : nlohmann::json(nullptr);
  j["accelerator_seconds"] =
      r.accelerator_seconds ? nlohmann::json(*r.accelerator_seconds) : nlohmann::json(nullptr);
}

inline void from_json(const nlohmann::json& j, LogRecord& r) {
  j.at("step").get_to(r.step);
  j.at("tokens_seen").get_to(r.tokens_seen);
  j.at("train_loss").get_to(r.train_loss);
  r.lr = j.value("lr", 0.0);
  r.epoch = j.value("epoch", std::uint64_t{0});
  if (j.contains("eval_metric") && !j["eval_metric"].is_null()) r.eval_metric = j["eval_metric"].get<double>();
  if (j.contains("accelerator_seconds") && !j["accelerator_seconds"].is_null())
    r.accelerator_seconds = j["accelerator_seconds"].get<double>();
}

/// Append-only; steps strictly increase.
class RunLog {
 public:
  void append(const LogRecord& r) {
    if (!records_.empty() && r.step <= records_.back().step) {
      throw Error("run log: step " + std::to_string(r.step) + " does not follow step " +
                  std::to_string(records_.back().step));
    }
    records_.push_back(r);
  }
  const std::vector<LogRecord>& records() const { return records_; }
  bool empty() const { return records_.empty(); }
  std::size_t size() const { return records_.size(); }

  void write_jsonl(std::ostream& os) const {
    for (const auto& r : records_) os << nlohmann::json(r).dump() << '\n';
  }
  void save(const std::string& path) const {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw Error("run log: cannot write " + path);
    write_jsonl(os);
  }
  static RunLog load(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw Error("run log: cannot read " + path);
    RunLog log;
    std::string line;
    std::size_t n = 0;
    while (std::getline(is, line)) {
      ++n;
      if (line.empty()) continue;
      try {
        log.append(nlohmann::json::parse(line).get<LogRecord>());
      } catch (const std::exception& e) {
        throw Error("run log " + path + " line " + std::to_string(n) + ": " + e.what());
      }
    }
    return log;
  }

  friend bool operator==(const RunLog& a, const RunLog& b) {
    return nlohmann::json(a.records_) == nlohmann::json(b.records_);
  }

 private:
  std::vector<LogRecord> records_;
};

// -------------------------------------------------------------- train loop

struct TrainOptions {
  BatchPlan plan;
  std::uint64_t steps = 1;
  double lr0 = 6e-4;
  double decay_factor = 100.0;
  AdamConfig adam;
  std::uint64_t warmup_steps = 0;  // linear ramp; off by default
  double clip_norm = 0.0;          // global-norm clipping; off by default
  std::uint64_t log_interval = 10;
  bool carry_state = false;  // recurrent state flows across consecutive batches of a lane
  // held-out fast eval at every log interval when set
  const TokenCorpus* eval_corpus = nullptr;
  std::vector<std::uint32_t> byte_lengths;
  std::size_t eval_batches = 8;
  std::size_t eval_batch = 16;
  double reference_tps = 0.0;  // > 0 fills accelerator_seconds
  std::string checkpoint_path;  // written at the end when non-empty
  std::uint64_t vocab_hash = 0;
  std::function<void(const LogRecord&)> on_log;
};

template <typename T>
struct TrainResult {
  RunLog log;
  ModelParams<T> params;
  OptimState<T> optim;
  std::uint64_t micro_batches = 0;
  std::uint64_t epochs = 0;
  std::vector<std::string> incidents;
};

/// Forward and backward on one micro-batch. Returns the summed loss over
/// scored positions; `grads` accumulate d(scale * loss)/d(param).
template <typename T>
double accumulate_micro_batch(const ModelParams<T>& params, const ModelConfig& cfg, const Batch& b,
                              std::type_identity_t<T> scale, std::vector<Tensor<T>>& grads,
                              std::type_identity_t<RecurrentState<T>>* state) {
  Graph<T> g;
  BoundParams<T> p(g, params, true);
  auto lg = forward(g, p, cfg, b.inputs, b.batch, state);
  std::vector<T> w(b.mask.size());
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = b.mask[i] ? scale : T{0};
  auto loss = ops::cross_entropy(lg, b.targets, std::span<const T>(w));
  g.backward(loss);
  const auto gs = p.grads(g);
  if (grads.empty()) {
    grads = gs;
  } else {
    for (std::size_t i = 0; i < gs.size(); ++i) {
      T* dst = grads[i].data();
      const T* src = gs[i].data();
      for (std::size_t j = 0, n = gs[i].size(); j < n; ++j) dst[j] += src[j];
    }
  }
  return static_cast<double>(loss.value()[0]) / static_cast<double>(scale);
}

/// Runs exactly opts.steps optimisation steps of opts.plan.accumulation
/// micro-batches each. The stream wraps when exhausted (epoch counter).
template <typename T>
TrainResult<T> train(ModelParams<T> params, const ModelConfig& cfg, const TokenCorpus& corpus,
                     const TrainOptions& opts) {
  if (opts.steps == 0) throw Error("train: budget must allow at least one step");
  if (corpus.id_limit() > cfg.vocab_size) {
    throw Error("train: corpus ids reach " + std::to_string(corpus.id_limit()) +
                " but the model vocabulary has " + std::to_string(cfg.vocab_size));
  }
  params.check_against(cfg);
  BatchPlan plan = opts.plan;
  plan.stride = plan.seq_len;
  BatchSequence seq(corpus.tokens(), plan, BatchMode::kTrain);

  TrainResult<T> res;
  res.optim = OptimState<T>::zeros(params);
  std::size_t cursor = 0;
  RecurrentState<T> state;
  const std::uint64_t interval = std::max<std::uint64_t>(opts.log_interval, 1);
  const std::uint64_t tokens_per_step = plan.tokens_per_step();
  Prefetcher<Batch> prefetch([&]() -> std::optional<Batch> {
    if (cursor == seq.size()) cursor = 0;
    return seq.at(cursor++);
  });
  std::uint64_t epoch_seen = 0;

  for (std::uint64_t step = 0; step < opts.steps; ++step) {
    std::vector<Tensor<T>> grads;
    double loss_sum = 0.0;
    std::uint64_t scored = 0;
    const T scale = T{1} / static_cast<T>(tokens_per_step);
    for (std::size_t a = 0; a < plan.accumulation; ++a) {
      Batch b = *prefetch.next();
      if (b.index == 0 && res.micro_batches > 0) {
        ++epoch_seen;
        state = RecurrentState<T>{};
      }
      if (!opts.carry_state) state = RecurrentState<T>{};
      loss_sum += accumulate_micro_batch(params, cfg, b, scale, grads,
                                         cfg.family == Family::kGpt ? nullptr : &state);
      scored += b.scored();
      ++res.micro_batches;
    }
    if (opts.clip_norm > 0) {
      double sq = 0;
      for (const auto& gt : grads)
        for (T x : gt.values()) sq += static_cast<double>(x) * x;
      const double norm = std::sqrt(sq);
      if (norm > opts.clip_norm) {
        const T f = static_cast<T>(opts.clip_norm / norm);
        for (auto& gt : grads)
          for (auto& x : gt.values()) x *= f;
      }
    }
    double lr = cosine_lr(step, opts.steps, opts.lr0, opts.decay_factor);
    if (opts.warmup_steps > 0 && step < opts.warmup_steps)
      lr *= static_cast<double>(step + 1) / static_cast<double>(opts.warmup_steps);
    if (!adam_step(params, grads, res.optim, lr, opts.adam)) {
      res.incidents.push_back("step " + std::to_string(step + 1) +
                              ": non-finite gradient, update rejected");
    }
    const std::uint64_t done = step + 1;
    if (done % interval == 0 || done == opts.steps) {
      LogRecord r;
      r.step = done;
      r.tokens_seen = done * tokens_per_step;
      r.train_loss = loss_sum / static_cast<double>(scored);
      r.lr = lr;
      r.epoch = epoch_seen;
      if (opts.reference_tps > 0)
        r.accelerator_seconds = static_cast<double>(r.tokens_seen) / opts.reference_tps;
      if (opts.eval_corpus) {
        const auto rep = fast_eval(model_scorer(params, cfg), *opts.eval_corpus, opts.byte_lengths,
                                   plan.seq_len, opts.eval_batch, opts.eval_batches);
        r.eval_metric = rep.mean_loss();
      }
      res.log.append(r);
      if (opts.on_log) opts.on_log(r);
    }
  }
  if (!opts.checkpoint_path.empty()) {
    nlohmann::json extra = {{"optimizer_step", res.optim.step},
                            {"micro_batches", res.micro_batches},
                            {"plan", plan}};
    save_checkpoint(opts.checkpoint_path, cfg, opts.vocab_hash, params, extra);
  }
  res.params = std::move(params);
  res.epochs = epoch_seen;
  return res;
}

}  // namespace lmkit
