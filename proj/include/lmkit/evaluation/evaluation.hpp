// SPDX-License-Identifier: Apache-2.0
#pragma once

// Perplexity, normalised perplexity and the fast / slow evaluation
// protocols.

#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "lmkit/corpus/batches.hpp"
#include "lmkit/corpus/corpus.hpp"
#include "lmkit/models/model.hpp"

namespace lmkit {

inline double perplexity(double total_loss, std::uint64_t tokens) {
  if (tokens == 0) throw Error("perplexity: token count must be at least 1");
  return std::exp(total_loss / static_cast<double>(tokens));
}

/// exp(loss / decoded bytes): comparable across tokenisers.
inline double normalised_perplexity(double total_loss, std::uint64_t bytes) {
  if (bytes == 0) throw Error("normalised perplexity: byte count must be at least 1");
  return std::exp(total_loss / static_cast<double>(bytes));
}

enum class Protocol { kFast, kSlow };

inline std::string protocol_name(Protocol p) { return p == Protocol::kFast ? "fast" : "slow"; }

inline Protocol parse_protocol(const std::string& s) {
  if (s == "fast") return Protocol::kFast;
  if (s == "slow") return Protocol::kSlow;
  throw Error("unknown protocol '" + s + "' (expected fast or slow)");
}

/// Windows of seq_len tokens every `stride` tokens; only the last `stride`
/// positions of each window are scored, so every scored prediction sees at
/// least seq_len - stride earlier tokens. stride == seq_len scores everything.
struct EvalOptions {
  Protocol protocol = Protocol::kFast;
  std::size_t seq_len = 512;
  std::size_t batch = 16;
  std::size_t stride = 512;
  std::size_t max_batches = 500;  // 0 means no limit

  /// Up to 500 batches of 16, stride = sequence length, every position.
  static EvalOptions fast(std::size_t seq_len, std::size_t batch = 16, std::size_t max_batches = 500) {
    return {Protocol::kFast, seq_len, batch, seq_len, max_batches};
  }
  /// Batch 1, stride 128, loss on the last 128 positions of each window.
  static EvalOptions slow(std::size_t seq_len, std::size_t stride = 128, std::size_t batch = 1) {
    return {Protocol::kSlow, seq_len, batch, std::min(stride, seq_len), 0};
  }

  std::size_t min_context() const { return seq_len - stride; }
};

struct EvalReport {
  std::string split;
  Protocol protocol = Protocol::kFast;
  double total_loss = 0.0;
  std::uint64_t tokens = 0;  // N: scored predictions
  std::uint64_t bytes = 0;   // B: decoded bytes of the scored targets
  double perplexity = 0.0;
  double normalised_perplexity = 0.0;
  std::size_t min_context = 0;
  std::size_t batches = 0;
  std::size_t windows = 0;

  double mean_loss() const { return total_loss / static_cast<double>(tokens); }
};

inline void to_json(nlohmann::json& j, const EvalReport& r) {
  j = nlohmann::json{{"split", r.split},
                     {"protocol", protocol_name(r.protocol)},
                     {"total_loss", r.total_loss},
                     {"tokens", r.tokens},
                     {"bytes", r.bytes},
                     {"mean_loss", r.tokens ? r.mean_loss() : 0.0},
                     {"perplexity", r.perplexity},
                     {"normalised_perplexity", r.normalised_perplexity},
                     {"min_context", r.min_context},
                     {"batches", r.batches},
                     {"windows", r.windows}};
}

/// Maps inputs [batch x seq] to unnormalised logits [(batch*seq) x V].
using LogitsFn =
    std::function<Tensor<double>(std::span<const TokenId> inputs, std::size_t batch, std::size_t seq)>;

/// Scorer for a model. Every window starts from a fresh recurrent state, so
/// recurrent models are warmed over the whole window before the scored tail.
template <typename T>
LogitsFn model_scorer(const ModelParams<T>& params, const ModelConfig& cfg) {
  return [&params, cfg](std::span<const TokenId> inputs, std::size_t batch, std::size_t) {
    Tensor<T> out = logits(params, cfg, inputs, batch);
    if constexpr (std::is_same_v<T, double>) {
      return out;
    } else {
      return out.template cast<double>();
    }
  };
}

/// Runs the protocol over the corpus stream. `byte_lengths[id]` is the
/// decoded length of each id (TokenCorpus::byte_lengths).
inline EvalReport evaluate(const LogitsFn& model, const TokenCorpus& corpus,
                           std::span<const std::uint32_t> byte_lengths, const EvalOptions& opt) {
  BatchPlan plan{opt.batch, opt.seq_len, opt.stride, 1};
  BatchSequence seq(corpus.tokens(), plan, BatchMode::kEval);
  if (byte_lengths.size() < corpus.id_limit()) {
    throw Error("evaluate: byte length table covers " + std::to_string(byte_lengths.size()) +
                " ids, corpus uses " + std::to_string(corpus.id_limit()));
  }
  EvalReport rep;
  rep.split = corpus.split();
  rep.protocol = opt.protocol;
  rep.min_context = opt.min_context();
  const std::size_t n_batches =
      opt.max_batches == 0 ? seq.size() : std::min(seq.size(), opt.max_batches);
  const std::size_t first_scored = opt.seq_len - opt.stride;
  for (std::size_t k = 0; k < n_batches; ++k) {
    const Batch b = seq.at(k);
    const Tensor<double> lg = model(b.inputs, b.batch, b.seq);
    const std::size_t V = lg.cols();
    if (lg.rows() != b.batch * b.seq) throw Error("evaluate: model returned the wrong number of rows");
    ++rep.batches;
    for (std::size_t r = 0; r < b.batch; ++r) {
      if (!b.valid[r]) continue;
      ++rep.windows;
      for (std::size_t t = first_scored; t < b.seq; ++t) {
        const std::size_t i = r * b.seq + t;
        if (!b.mask[i]) continue;
        const double* row = lg.data() + i * V;
        double mx = row[0];
        for (std::size_t j = 1; j < V; ++j) mx = std::max(mx, row[j]);
        double sum = 0;
        for (std::size_t j = 0; j < V; ++j) sum += std::exp(row[j] - mx);
        rep.total_loss += std::log(sum) + mx - row[b.targets[i]];
        ++rep.tokens;
        rep.bytes += byte_lengths[b.targets[i]];
      }
    }
  }
  if (rep.tokens == 0) {
    throw Error("evaluate: split '" + corpus.split() + "' has no prediction with " +
                std::to_string(rep.min_context) + " tokens of context");
  }
  rep.perplexity = perplexity(rep.total_loss, rep.tokens);
  rep.normalised_perplexity =
      rep.bytes > 0 ? normalised_perplexity(rep.total_loss, rep.bytes) : std::nan("");
  return rep;
}

inline EvalReport fast_eval(const LogitsFn& model, const TokenCorpus& corpus,
                            std::span<const std::uint32_t> byte_lengths, std::size_t seq_len,
                            std::size_t batch = 16, std::size_t max_batches = 500) {
  return evaluate(model, corpus, byte_lengths, EvalOptions::fast(seq_len, batch, max_batches));
}

inline EvalReport slow_eval(const LogitsFn& model, const TokenCorpus& corpus,
                            std::span<const std::uint32_t> byte_lengths, std::size_t seq_len,
                            std::size_t stride = 128, std::size_t batch = 1) {
  return evaluate(model, corpus, byte_lengths, EvalOptions::slow(seq_len, stride, batch));
}

/// One report per split under the same protocol; every split must carry the
/// model's vocabulary hash.
inline std::vector<EvalReport> eval_splits(const LogitsFn& model, std::uint64_t vocab_hash,
                                           const std::vector<TokenCorpus>& splits,
                                           std::span<const std::uint32_t> byte_lengths,
                                           const EvalOptions& opt) {
  for (const auto& s : splits) {
    if (s.vocab_hash() != vocab_hash) {
      throw Error("eval: split '" + s.split() + "' was tokenised with vocabulary " +
                  std::to_string(s.vocab_hash()) + ", model expects " + std::to_string(vocab_hash));
    }
  }
  std::vector<EvalReport> out;
  out.reserve(splits.size());
  for (const auto& s : splits) out.push_back(evaluate(model, s, byte_lengths, opt));
  return out;
}

}  // namespace lmkit
