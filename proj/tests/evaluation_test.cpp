// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "lmkit/evaluation/evaluation.hpp"
#include "lmkit/models/params.hpp"
#include "lmkit/numerics/ops.hpp"
#include "lmkit/tokenizer/bpe.hpp"
#include "support/synthetic.hpp"

namespace lmkit {
namespace {

TokenCorpus plain_corpus(std::vector<TokenId> ids, std::size_t id_limit, std::string split = "test") {
  return TokenCorpus(std::move(ids), {0}, 9, id_limit, std::move(split));
}

LogitsFn uniform_model(std::size_t V) {
  return [V](std::span<const TokenId> in, std::size_t, std::size_t) {
    return Tensor<double>(Shape{in.size(), V});
  };
}

TEST(Perplexity, UniformModelGivesVocabularySize) {
  const std::uint64_t N = 1000;
  EXPECT_NEAR(perplexity(N * std::log(16.0), N), 16.0, 1e-12);
  EXPECT_DOUBLE_EQ(perplexity(0.0, N), 1.0);
  EXPECT_NEAR(perplexity(N * std::numbers::ln2, N), 2.0, 1e-12);
  EXPECT_THROW(perplexity(1.0, 0), Error);
}

TEST(Perplexity, NormalisedUsesBytes) {
  const std::uint64_t N = 1000;
  EXPECT_NEAR(normalised_perplexity(N * std::log(16.0), 4 * N), 2.0, 1e-12);
  EXPECT_DOUBLE_EQ(normalised_perplexity(0.0, 10), 1.0);
  EXPECT_THROW(normalised_perplexity(1.0, 0), Error);
}

TEST(Perplexity, NormalisedIsTokeniserInvariantUnderPerByteLoss) {
  // A model paying 8 ln 2 nats per decoded byte: total loss depends only on
  // the text, so two vocabularies agree on normalised perplexity (256) while
  // token perplexities differ.
  const std::string text = testing::zipf_text(20000, 3);
  const auto v1 = train_bpe(text, 300);
  const auto v2 = train_bpe(text, 1000);
  double ppl[2], nppl[2];
  int k = 0;
  for (const auto* v : {&v1, &v2}) {
    const auto ids = encode(text, *v);
    double loss = 0;
    std::uint64_t bytes = 0;
    for (auto id : ids) {
      bytes += v->token(id).size();
      loss += 8.0 * std::numbers::ln2 * static_cast<double>(v->token(id).size());
    }
    ppl[k] = perplexity(loss, ids.size());
    nppl[k] = normalised_perplexity(loss, bytes);
    ++k;
  }
  EXPECT_NEAR(nppl[0], 256.0, 1e-9);
  EXPECT_NEAR(nppl[1], 256.0, 1e-9);
  EXPECT_GT(ppl[1], ppl[0] * 1.5);
}

TEST(Perplexity, OrderingsAgreeAtFixedCounts) {
  const std::uint64_t N = 500, B = 1700;
  std::vector<double> losses = {900.0, 1200.0, 300.0, 1250.0};
  for (std::size_t i = 0; i < losses.size(); ++i)
    for (std::size_t j = 0; j < losses.size(); ++j) {
      const bool lt = losses[i] < losses[j];
      EXPECT_EQ(lt, perplexity(losses[i], N) < perplexity(losses[j], N));
      EXPECT_EQ(lt, normalised_perplexity(losses[i], B) < normalised_perplexity(losses[j], B));
    }
}

TEST(Evaluate, UniformModelThroughBothProtocols) {
  std::vector<TokenId> ids(4097);
  for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = static_cast<TokenId>((i * 7) % 16);
  const auto c = plain_corpus(ids, 16);
  const std::vector<std::uint32_t> four(16, 4);
  for (auto opt : {EvalOptions::fast(512), EvalOptions::slow(512)}) {
    const auto r = evaluate(uniform_model(16), c, four, opt);
    EXPECT_NEAR(r.perplexity, 16.0, 1e-9);
    EXPECT_NEAR(r.normalised_perplexity, 2.0, 1e-9);
    EXPECT_EQ(r.bytes, 4 * r.tokens);
  }
  const auto fast = evaluate(uniform_model(16), c, four, EvalOptions::fast(512));
  const auto slow = evaluate(uniform_model(16), c, four, EvalOptions::slow(512));
  EXPECT_EQ(fast.protocol, Protocol::kFast);
  EXPECT_EQ(slow.protocol, Protocol::kSlow);
  EXPECT_EQ(fast.min_context, 0u);
  EXPECT_EQ(slow.min_context, 384u);
  EXPECT_EQ(fast.tokens, 4096u);
  EXPECT_EQ(slow.tokens, 4096u - 384);  // the first 384 targets never get 384 tokens of context
  EXPECT_EQ(slow.windows, 4 * fast.windows);
}

TEST(Evaluate, SlowScoresOnlyPredictionsWithLongContext) {
  // NaN logits wherever fewer than 384 tokens precede the prediction: any
  // such position leaking into the loss makes it NaN.
  LogitsFn trap = [](std::span<const TokenId> in, std::size_t b, std::size_t s) {
    Tensor<double> out(Shape{in.size(), 8});
    for (std::size_t r = 0; r < b; ++r)
      for (std::size_t t = 0; t < 384; ++t)
        for (std::size_t j = 0; j < 8; ++j) out[(r * s + t) * 8 + j] = std::nan("");
    return out;
  };
  std::vector<TokenId> ids(3000);
  for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = static_cast<TokenId>(i % 8);
  const std::vector<std::uint32_t> one(8, 1);
  const auto r = evaluate(trap, plain_corpus(ids, 8), one, EvalOptions::slow(512));
  EXPECT_TRUE(std::isfinite(r.total_loss));
  EXPECT_NEAR(r.perplexity, 8.0, 1e-9);
  EXPECT_TRUE(std::isnan(evaluate(trap, plain_corpus(ids, 8), one, EvalOptions::fast(512)).total_loss));
}

TEST(Evaluate, FastUsesEveryAvailableBatchBelowTheCap) {
  std::vector<TokenId> ids(64 * 16 * 3 + 1, 1);
  const auto c = plain_corpus(ids, 4);
  const std::vector<std::uint32_t> one(4, 1);
  auto r = fast_eval(uniform_model(4), c, one, 64);
  EXPECT_EQ(r.batches, 3u);
  EXPECT_EQ(r.tokens, ids.size() - 1);
  r = fast_eval(uniform_model(4), c, one, 64, 16, 2);
  EXPECT_EQ(r.batches, 2u);
  EXPECT_EQ(r.tokens, 2u * 16 * 64);
}

TEST(Evaluate, DeterministicOnARealModel) {
  auto cfg = preset("gpt-desk");
  cfg.vocab_size = 20;
  const auto p = ModelParams<double>::init(cfg, 3);
  const auto ids = testing::Order2Markov(19, 1).sample(2000, 2);
  const auto c = TokenCorpus::from_documents({ids}, 9, 20, "test");
  const std::vector<std::uint32_t> one(20, 1);
  const auto a = fast_eval(model_scorer(p, cfg), c, one, 64, 4);
  const auto b = fast_eval(model_scorer(p, cfg), c, one, 64, 4);
  EXPECT_EQ(nlohmann::json(a).dump(), nlohmann::json(b).dump());

  // the first window's loss equals the graph cross-entropy
  Graph<double> g;
  BoundParams<double> bp(g, p, false);
  std::vector<TokenId> in(ids.begin(), ids.begin() + 64), tg(ids.begin() + 1, ids.begin() + 65);
  const double ce = ops::cross_entropy(forward(g, bp, cfg, in, 1), tg).value()[0];
  const auto one_window = fast_eval(model_scorer(p, cfg), plain_corpus({ids.begin(), ids.begin() + 65}, 20), one, 64, 1);
  EXPECT_NEAR(one_window.total_loss, ce, 1e-9);
}

TEST(Evaluate, SlowEvalOfTheTrueChainMatchesItsEntropyRate) {
  const testing::Order2Markov chain(6, 11);
  const std::size_t K = chain.alphabet();
  LogitsFn oracle = [&](std::span<const TokenId> in, std::size_t b, std::size_t s) {
    Tensor<double> out(Shape{in.size(), K});
    for (std::size_t r = 0; r < b; ++r)
      for (std::size_t t = 1; t < s; ++t)
        for (std::size_t c = 0; c < K; ++c)
          out[(r * s + t) * K + c] = std::log(chain.prob(in[r * s + t - 1], in[r * s + t], c));
    return out;
  };
  const auto ids = chain.sample(200000, 5);
  const std::vector<std::uint32_t> one(K, 1);
  const auto r = slow_eval(oracle, plain_corpus(ids, K), one, 512, 128, 8);
  const double h = chain.entropy_rate();
  EXPECT_NEAR(r.mean_loss(), h, 0.05 * h);
}

TEST(Evaluate, FastLossIsAtLeastSlowLossWhenContextHelps) {
  // Add-one counts of the tokens seen so far in the window: predictions
  // improve with context, so short-context positions cost more.
  const std::size_t V = 40;
  LogitsFn counter = [V](std::span<const TokenId> in, std::size_t b, std::size_t s) {
    Tensor<double> out(Shape{in.size(), V});
    for (std::size_t r = 0; r < b; ++r) {
      std::vector<double> counts(V, 1.0);
      for (std::size_t t = 0; t < s; ++t) {
        counts[in[r * s + t]] += 1.0;
        for (std::size_t j = 0; j < V; ++j) out[(r * s + t) * V + j] = std::log(counts[j]);
      }
    }
    return out;
  };
  const std::vector<std::uint32_t> one(V, 1);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto ids = testing::topic_stream(20000, 4, 10, 20000, seed);  // one topic per seed
    const auto c = plain_corpus(ids, V);
    const auto fast = fast_eval(counter, c, one, 512, 4);
    const auto slow = slow_eval(counter, c, one, 512, 128, 4);
    EXPECT_GE(fast.mean_loss(), slow.mean_loss()) << "seed " << seed;
  }
}

TEST(EvalSplits, ReportsPerSplitAndChecksVocabulary) {
  std::vector<TokenId> ids(700, 2);
  const std::vector<std::uint32_t> one(4, 1);
  const auto opt = EvalOptions::fast(64, 2);
  EXPECT_TRUE(eval_splits(uniform_model(4), 9, {}, one, opt).empty());
  auto a = plain_corpus(ids, 4, "a"), b = plain_corpus(ids, 4, "b");
  auto reps = eval_splits(uniform_model(4), 9, {a, b}, one, opt);
  ASSERT_EQ(reps.size(), 2u);
  EXPECT_EQ(reps[0].split, "a");
  EXPECT_EQ(reps[1].split, "b");
  reps[1].split = "a";
  EXPECT_EQ(nlohmann::json(reps[0]).dump(), nlohmann::json(reps[1]).dump());
  auto other = TokenCorpus(ids, {0}, 10, 4, "other");
  EXPECT_THROW(eval_splits(uniform_model(4), 9, {a, other}, one, opt), Error);
}

TEST(EvalReport, SerialisesEveryField) {
  EvalReport r;
  r.split = "test";
  r.protocol = Protocol::kSlow;
  r.total_loss = 10;
  r.tokens = 5;
  r.bytes = 20;
  r.min_context = 384;
  const auto j = nlohmann::json(r);
  for (const char* k : {"split", "protocol", "total_loss", "tokens", "bytes", "perplexity",
                        "normalised_perplexity", "min_context", "mean_loss"})
    EXPECT_TRUE(j.contains(k)) << k;
  EXPECT_EQ(j["protocol"], "slow");
  EXPECT_EQ(parse_protocol("fast"), Protocol::kFast);
  EXPECT_THROW(parse_protocol("medium"), Error);
}

}  // namespace
}  // namespace lmkit
