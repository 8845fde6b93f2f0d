// SPDX-License-Identifier: Apache-2.0
#pragma once

// Compute accounting: analytic FLOP counts, throughput measurement,
// compute-class budgets, cross-hardware conversion and log-linear scaling
// fits.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "lmkit/corpus/batches.hpp"
#include "lmkit/models/config.hpp"
#include "lmkit/models/params.hpp"
#include "lmkit/tokenizer/vocabulary.hpp"
#include "lmkit/training/training.hpp"

namespace lmkit {

// ------------------------------------------------------------------- FLOPs

/// FLOPs of one block for a full sequence at batch 1.
struct LayerFlops {
  double projections = 0;  // dense matmuls: attention/cell in and out, MLP
  double mixing = 0;       // attention score and value contractions, recurrent matmuls
  double elementwise = 0;  // one FLOP per element per pointwise op

  double total() const { return projections + mixing + elementwise; }
};

struct FlopCount {
  std::vector<LayerFlops> layers;
  double head = 0;        // output projection
  double final_norm = 0;  // embeddings are lookups and cost nothing

  double total() const {
    double t = head + final_norm;
    for (const auto& l : layers) t += l.total();
    return t;
  }
};

/// Forward FLOPs at batch 1 over cfg.seq_len tokens. Two FLOPs per
/// multiply-accumulate; pointwise ops (biases, norms, activations, softmax,
/// residual adds, gate products) count once per element.
inline FlopCount count_forward_flops(const ModelConfig& c) {
  c.validate();
  const double s = static_cast<double>(c.seq_len), d = static_cast<double>(c.d_model),
               w = static_cast<double>(c.width()), m = static_cast<double>(c.mlp_width()),
               h = static_cast<double>(c.n_heads), dh = static_cast<double>(c.d_head),
               V = static_cast<double>(c.vocab_size);
  LayerFlops layer;
  const double mlp = 2 * s * (2 * d * m);
  // shared per block: two norms, MLP biases and ReLU, out bias, two residual adds
  const double shared_el = 2 * s * d + s * m + s * m + s * d + s * d + 2 * s * d;
  if (c.family == Family::kGpt) {
    layer.projections = 2 * s * (3 * d * w + w * d) + mlp;
    layer.mixing = 2 * (2 * s * s * w);
    // q/k/v biases; score scale, causal mask and softmax over every head
    layer.elementwise = 3 * s * w + 3 * s * s * h + shared_el;
  } else {
    layer.projections = 2 * s * (4 * d * w + w * d) + mlp;
    // gate biases, three sigmoids and a tanh, c = f*c + i*z, h = o*tanh(c)
    layer.elementwise = 4 * s * w + 4 * s * w + 3 * s * w + 2 * s * w + shared_el;
    if (c.family == Family::kLstm) {
      layer.mixing = 4 * 2 * s * h * dh * dh;  // block-diagonal recurrent matrices
      layer.elementwise += 4 * s * w;        // adding the recurrent term
    }
  }
  FlopCount out;
  out.layers.assign(c.n_layers, layer);
  out.head = 2 * s * d * V;
  out.final_norm = s * d;
  return out;
}

/// (T / seq_len) * forward FLOPs * 3: the backward pass costs twice the forward.
inline double total_training_flops(double tokens, const ModelConfig& c) {
  if (!(tokens > 0)) throw Error("total_training_flops: token count must be positive");
  return tokens / static_cast<double>(c.seq_len) * count_forward_flops(c).total() * 3.0;
}

// ------------------------------------------------------------------ budgets

struct ComputeBudget {
  double hours = 0;
  double tokens_per_second = 0;
  double total_tokens = 0;  // T = 3600 v h
  std::uint64_t tokens_per_step = 0;
  std::uint64_t steps = 0;  // floor(T / tokens per step)
};

inline void to_json(nlohmann::json& j, const ComputeBudget& b) {
  j = nlohmann::json{{"hours", b.hours},
                     {"tokens_per_second", b.tokens_per_second},
                     {"total_tokens", b.total_tokens},
                     {"tokens_per_step", b.tokens_per_step},
                     {"steps", b.steps}};
}

inline ComputeBudget plan_budget(double tokens_per_second, double hours, std::uint64_t tokens_per_step) {
  if (!(tokens_per_second > 0)) throw Error("plan_budget: throughput must be positive");
  if (!(hours > 0)) throw Error("plan_budget: hours must be positive");
  if (tokens_per_step == 0) throw Error("plan_budget: tokens per step must be positive");
  ComputeBudget b;
  b.hours = hours;
  b.tokens_per_second = tokens_per_second;
  b.total_tokens = 3600.0 * tokens_per_second * hours;
  b.tokens_per_step = tokens_per_step;
  b.steps = static_cast<std::uint64_t>(std::floor(b.total_tokens / static_cast<double>(tokens_per_step)));
  return b;
}

inline ComputeBudget plan_budget(double tokens_per_second, double hours, const BatchPlan& plan) {
  plan.validate();
  return plan_budget(tokens_per_second, hours, plan.tokens_per_step());
}

/// Hours device B needs to process T tokens at v_other tokens per second.
inline double convert_hardware(double tokens, double v_other) {
  if (!(v_other > 0)) throw Error("convert_hardware: throughput must be positive");
  return tokens / (3600.0 * v_other);
}

/// The same conversion from a budget: h * v / v_other, so converting back
/// to the planning device returns its hours exactly.
inline double convert_hardware(const ComputeBudget& b, double v_other) {
  if (!(v_other > 0)) throw Error("convert_hardware: throughput must be positive");
  return b.hours * (b.tokens_per_second / v_other);
}

struct CurvePoint {
  std::uint64_t step = 0;
  double seconds = 0;  // step * tokens per step / reference throughput
  double metric = 0;   // eval metric when logged, else the train loss
};

inline std::vector<CurvePoint> convert_curve(const RunLog& log, std::uint64_t tokens_per_step,
                                             double v_reference) {
  if (!(v_reference > 0)) throw Error("convert_curve: reference throughput must be positive");
  std::vector<CurvePoint> out;
  out.reserve(log.size());
  for (const auto& r : log.records()) {
    out.push_back({r.step,
                   static_cast<double>(r.step) * static_cast<double>(tokens_per_step) / v_reference,
                   r.eval_metric.value_or(r.train_loss)});
  }
  return out;
}

// --------------------------------------------------------------- throughput

struct ThroughputEntry {
  std::size_t batch = 0;
  bool ok = false;
  double median_step_seconds = 0;
  double tokens_per_second = 0;
  std::string error;  // why the candidate failed
};

struct ThroughputReport {
  std::uint64_t config_hash = 0;
  std::string device;
  std::size_t seq_len = 0;
  std::size_t warmup_steps = 10;
  std::size_t timed_steps = 20;
  std::vector<ThroughputEntry> entries;
  double best_tokens_per_second = 0;
  std::size_t best_batch = 0;
};

inline void to_json(nlohmann::json& j, const ThroughputEntry& e) {
  j = nlohmann::json{{"batch", e.batch}, {"ok", e.ok}};
  if (e.ok) {
    j["median_step_seconds"] = e.median_step_seconds;
    j["tokens_per_second"] = e.tokens_per_second;
  } else {
    j["error"] = e.error;
  }
}

inline void to_json(nlohmann::json& j, const ThroughputReport& r) {
  j = nlohmann::json{{"config_hash", r.config_hash},
                     {"device", r.device},
                     {"seq_len", r.seq_len},
                     {"warmup_steps", r.warmup_steps},
                     {"timed_steps", r.timed_steps},
                     {"entries", r.entries},
                     {"best_tokens_per_second", r.best_tokens_per_second},
                     {"best_batch", r.best_batch},
                     {"deterministic", false}};
}

inline std::uint64_t config_hash(const ModelConfig& c) { return fnv1a(nlohmann::json(c).dump()); }

/// One forward + backward + update at a fixed batch size.
using StepFn = std::function<void()>;
/// Builds the step for a batch size; throwing marks the candidate as failed
/// (for instance when memory runs out) and the sweep continues.
using StepFactory = std::function<StepFn(std::size_t batch)>;
/// Monotonic seconds.
using Clock = std::function<double()>;

inline Clock steady_clock_seconds() {
  return [] {
    return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch()).count();
  };
}

struct ThroughputOptions {
  std::string device = "cpu";
  std::size_t seq_len = 512;
  std::size_t warmup_steps = 10;
  std::size_t timed_steps = 20;
  std::uint64_t config_hash = 0;
};

inline double median(std::vector<double> v) {
  if (v.empty()) throw Error("median of an empty sample");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

/// Per candidate: warmup steps discarded, median over timed steps,
/// tokens/s = batch * seq_len / median step time.
inline ThroughputReport measure_throughput(const StepFactory& factory, std::span<const std::size_t> batches,
                                           const ThroughputOptions& opt, const Clock& clock = steady_clock_seconds()) {
  if (batches.empty()) throw Error("measure_throughput: at least one batch size is required");
  if (opt.timed_steps == 0) throw Error("measure_throughput: at least one timed step is required");
  ThroughputReport rep;
  rep.config_hash = opt.config_hash;
  rep.device = opt.device;
  rep.seq_len = opt.seq_len;
  rep.warmup_steps = opt.warmup_steps;
  rep.timed_steps = opt.timed_steps;
  for (std::size_t b : batches) {
    ThroughputEntry e;
    e.batch = b;
    try {
      if (b == 0) throw Error("batch size must be positive");
      StepFn step = factory(b);
      for (std::size_t i = 0; i < opt.warmup_steps; ++i) step();
      std::vector<double> times;
      times.reserve(opt.timed_steps);
      for (std::size_t i = 0; i < opt.timed_steps; ++i) {
        const double t0 = clock();
        step();
        times.push_back(clock() - t0);
      }
      e.median_step_seconds = median(std::move(times));
      if (!(e.median_step_seconds > 0)) throw Error("non-positive step time");
      e.tokens_per_second = static_cast<double>(b * opt.seq_len) / e.median_step_seconds;
      e.ok = true;
    } catch (const std::exception& ex) {
      e.ok = false;
      e.error = ex.what();
    }
    if (e.ok && e.tokens_per_second > rep.best_tokens_per_second) {
      rep.best_tokens_per_second = e.tokens_per_second;
      rep.best_batch = b;
    }
    rep.entries.push_back(std::move(e));
  }
  if (rep.best_batch == 0) {
    std::string why;
    for (const auto& e : rep.entries) why += " [batch " + std::to_string(e.batch) + ": " + e.error + "]";
    throw Error("measure_throughput: every batch size failed" + why);
  }
  return rep;
}

/// Training steps of a real model on random tokens.
template <typename T>
StepFactory model_step_factory(const ModelConfig& cfg, std::uint64_t seed) {
  return [cfg, seed](std::size_t batch) -> StepFn {
    struct State {
      ModelParams<T> params;
      OptimState<T> optim;
      Batch batch;
    };
    auto st = std::make_shared<State>();
    st->params = ModelParams<T>::init(cfg, seed);
    st->optim = OptimState<T>::zeros(st->params);
    const std::size_t s = cfg.seq_len, n = batch * s;
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::size_t> tok(0, cfg.vocab_size - 1);
    Batch& b = st->batch;
    b.batch = batch;
    b.seq = s;
    b.inputs.resize(n);
    b.targets.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      b.inputs[i] = static_cast<TokenId>(tok(rng));
      b.targets[i] = static_cast<TokenId>(tok(rng));
    }
    b.mask.assign(n, 1);
    b.valid.assign(batch, true);
    return [st, cfg, n] {
      std::vector<Tensor<T>> grads;
      accumulate_micro_batch(st->params, cfg, st->batch, T{1} / static_cast<T>(n), grads, nullptr);
      adam_step(st->params, grads, st->optim, 6e-4);
    };
  };
}

// ------------------------------------------------------------ scaling laws

enum class ResourceAxis { kHours, kFlops };

inline std::string axis_name(ResourceAxis a) { return a == ResourceAxis::kHours ? "hours" : "flops"; }

inline ResourceAxis parse_axis(const std::string& s) {
  if (s == "hours") return ResourceAxis::kHours;
  if (s == "flops") return ResourceAxis::kFlops;
  throw Error("unknown resource axis '" + s + "' (expected hours or flops)");
}

/// y = intercept + slope * ln(x).
struct ScalingFit {
  double slope = 0;
  double intercept = 0;
  ResourceAxis axis = ResourceAxis::kHours;
  std::vector<double> residuals;  // y - prediction, in input order

  double predict(double x) const { return intercept + slope * std::log(x); }
};

inline void to_json(nlohmann::json& j, const ScalingFit& f) {
  j = nlohmann::json{{"slope", f.slope},
                     {"intercept", f.intercept},
                     {"axis", axis_name(f.axis)},
                     {"residuals", f.residuals}};
}

struct ScalePoint {
  double x = 0;  // resource: hours or FLOPs
  double y = 0;  // normalised perplexity
};

/// Ordinary least squares of y on ln(x).
inline ScalingFit fit_scaling_law(std::span<const ScalePoint> pts, ResourceAxis axis = ResourceAxis::kHours) {
  if (pts.size() < 3) {
    throw Error("fit_scaling_law: need at least 3 points, got " + std::to_string(pts.size()));
  }
  double mx = 0, my = 0;
  for (const auto& p : pts) {
    if (!(p.x > 0)) throw Error("fit_scaling_law: resource values must be positive");
    if (!std::isfinite(p.y)) throw Error("fit_scaling_law: metric values must be finite");
    mx += std::log(p.x);
    my += p.y;
  }
  const double n = static_cast<double>(pts.size());
  mx /= n;
  my /= n;
  double sxx = 0, sxy = 0;
  for (const auto& p : pts) {
    const double dx = std::log(p.x) - mx;
    sxx += dx * dx;
    sxy += dx * (p.y - my);
  }
  if (sxx == 0) throw Error("fit_scaling_law: all resource values are equal");
  ScalingFit f;
  f.axis = axis;
  f.slope = sxy / sxx;
  f.intercept = my - f.slope * mx;
  for (const auto& p : pts) f.residuals.push_back(p.y - f.predict(p.x));
  return f;
}

/// x* = exp((a1 - a2) / (b2 - b1)); parallel lines never meet.
inline double intersect_laws(const ScalingFit& f1, const ScalingFit& f2) {
  if (f1.slope == f2.slope) throw Error("intersect_laws: equal slopes, the laws never intersect");
  return std::exp((f1.intercept - f2.intercept) / (f2.slope - f1.slope));
}

struct IntersectionRange {
  double at = 0;
  double low = 0;
  double high = 0;
};

inline void to_json(nlohmann::json& j, const IntersectionRange& r) {
  j = nlohmann::json{{"intersection", r.at}, {"low", r.low}, {"high", r.high}};
}

/// The intersection and its extremes when every slope and intercept moves by
/// up to the given tolerance (half a unit in the last published digit, say).
inline IntersectionRange intersection_sensitivity(const ScalingFit& f1, const ScalingFit& f2,
                                                  double slope_tol, double intercept_tol) {
  IntersectionRange r;
  r.at = intersect_laws(f1, f2);
  r.low = r.high = r.at;
  for (int k = 0; k < 16; ++k) {
    ScalingFit a = f1, b = f2;
    a.slope += (k & 1 ? 1 : -1) * slope_tol;
    b.slope += (k & 2 ? 1 : -1) * slope_tol;
    a.intercept += (k & 4 ? 1 : -1) * intercept_tol;
    b.intercept += (k & 8 ? 1 : -1) * intercept_tol;
    if ((a.slope - b.slope) * (f1.slope - f2.slope) <= 0) {
      r.low = 0;
      r.high = std::numeric_limits<double>::infinity();
      continue;
    }
    const double x = intersect_laws(a, b);
    r.low = std::min(r.low, x);
    r.high = std::max(r.high, x);
  }
  return r;
}

// ---------------------------------------------------------------- plot data

using Series = std::vector<std::pair<double, double>>;

/// Two whitespace-separated columns, one point per line.
inline void write_plot_data(const std::string& path, const Series& s) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw Error("cannot write plot data " + path);
  os.precision(17);
  for (const auto& [x, y] : s) os << x << ' ' << y << '\n';
  if (!os) throw Error("failed writing plot data " + path);
}

inline Series fitted_line(const ScalingFit& f, double x_min, double x_max, std::size_t points = 50) {
  if (!(x_min > 0) || !(x_max > x_min) || points < 2) throw Error("fitted_line: bad range");
  Series s;
  const double l0 = std::log(x_min), l1 = std::log(x_max);
  for (std::size_t i = 0; i < points; ++i) {
    const double x = std::exp(l0 + (l1 - l0) * static_cast<double>(i) / static_cast<double>(points - 1));
    s.emplace_back(x, f.predict(x));
  }
  return s;
}

}  // namespace lmkit
