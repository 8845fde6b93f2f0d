// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <limits>

#include "lmkit/training/training.hpp"
#include "support/synthetic.hpp"

namespace lmkit {
namespace {

TEST(CosineLr, EndpointsAndMidpoint) {
  EXPECT_DOUBLE_EQ(cosine_lr(0, 1000), 0.0006);
  EXPECT_NEAR(cosine_lr(1000, 1000), 0.000006, 1e-18);
  EXPECT_NEAR(cosine_lr(500, 1000), 0.000303, 1e-15);
  EXPECT_NEAR(cosine_lr(5000, 1000), 0.000006, 1e-18);  // clamped past the end
}

TEST(CosineLr, MonotoneNonIncreasing) {
  for (std::uint64_t total : {1ull, 7ull, 100ull, 12345ull}) {
    double prev = cosine_lr(0, total);
    for (std::uint64_t s = 1; s <= total + 3; ++s) {
      const double lr = cosine_lr(s, total);
      EXPECT_LE(lr, prev) << total << " " << s;
      prev = lr;
    }
  }
}

ModelParams<double> one_tensor(std::vector<double> values) {
  ModelParams<double> p;
  const std::size_t n = values.size();
  p.add("w", Tensor<double>(Shape{n}, std::move(values)));
  return p;
}

TEST(Adam, ZeroGradientsLeaveParametersUnchanged) {
  auto p = one_tensor({1.0, -2.0, 3.0});
  auto st = OptimState<double>::zeros(p);
  for (int i = 0; i < 5; ++i) ASSERT_TRUE(adam_step(p, {Tensor<double>(Shape{3})}, st, 1e-3));
  EXPECT_EQ(p["w"].values(), (std::vector<double>{1.0, -2.0, 3.0}));
  EXPECT_EQ(st.step, 5u);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  // bias-corrected moments on the first step: m_hat = g, v_hat = g^2
  const double lr = 1e-3;
  const std::vector<double> g = {0.5, -3.0, 1e-3};
  auto p = one_tensor({0.0, 0.0, 0.0});
  auto st = OptimState<double>::zeros(p);
  adam_step(p, {Tensor<double>(Shape{3}, g)}, st, lr);
  for (std::size_t i = 0; i < 3; ++i)
    EXPECT_NEAR(p["w"][i], -lr * g[i] / (std::abs(g[i]) + 1e-8), 1e-15);
}

TEST(Adam, ConstantGradientGivesUpdatesOfSizeLr) {
  const double lr = 1e-2;
  for (double g : {1e-4, 0.3, 50.0}) {
    auto p = one_tensor({0.0});
    auto st = OptimState<double>::zeros(p);
    double prev = 0;
    for (int i = 0; i < 200; ++i) {
      prev = p["w"][0];
      adam_step(p, {Tensor<double>(Shape{1}, {g})}, st, lr);
    }
    EXPECT_NEAR(prev - p["w"][0], lr, lr * 1e-4) << g;
  }
}

TEST(Adam, NonFiniteGradientRejected) {
  auto p = one_tensor({1.0, 2.0});
  auto st = OptimState<double>::zeros(p);
  EXPECT_FALSE(adam_step(p, {Tensor<double>(Shape{2}, {0.1, std::nan("")})}, st, 0.1));
  EXPECT_FALSE(adam_step(
      p, {Tensor<double>(Shape{2}, {std::numeric_limits<double>::infinity(), 0.0})}, st, 0.1));
  EXPECT_EQ(p["w"].values(), (std::vector<double>{1.0, 2.0}));
  EXPECT_EQ(st.step, 0u);
  EXPECT_THROW(adam_step(p, {Tensor<double>(Shape{3})}, st, 0.1), Error);
}

ModelConfig small_config(Family f, std::size_t vocab) {
  ModelConfig c;
  c.name = "test";
  c.family = f;
  c.d_model = 16;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_head = 8;
  c.vocab_size = vocab;
  c.seq_len = 16;
  c.block_len = f == Family::kQlstm ? 4 : 1;
  return c;
}

TokenCorpus markov_corpus(std::size_t n, std::size_t alphabet, std::uint64_t table, std::uint64_t seed,
                          std::string split = "train") {
  const auto ids = testing::Order2Markov(alphabet, table).sample(n, seed);
  return TokenCorpus::from_documents({ids}, 5, alphabet + 1, std::move(split));
}

TokenCorpus byte_corpus(const std::string& text, std::string split = "train") {
  std::vector<TokenId> ids;
  for (unsigned char ch : text) ids.push_back(ch);
  return TokenCorpus::from_documents({ids}, 5, 257, std::move(split));
}

Batch rows_of(const Batch& b, std::size_t first, std::size_t count) {
  Batch out = b;
  out.batch = count;
  const std::size_t s = b.seq;
  auto cut = [&](auto& v) { v = {v.begin() + first * s, v.begin() + (first + count) * s}; };
  cut(out.inputs);
  cut(out.targets);
  cut(out.mask);
  return out;
}

class Accumulation : public ::testing::TestWithParam<Family> {};

TEST_P(Accumulation, TwoHalvesEqualOneFullBatch) {
  const auto cfg = small_config(GetParam(), 9);
  const auto p = ModelParams<double>::init(cfg, 4);
  const auto c = markov_corpus(3000, 8, 1, 2);
  const Batch full = iterate_batches(c, {4, 16, 16, 1}, BatchMode::kTrain).at(3);
  const double scale = 1.0 / (4 * 16);
  std::vector<Tensor<double>> g_full, g_acc;
  const double l_full = accumulate_micro_batch(p, cfg, full, scale, g_full, nullptr);
  double l_acc = accumulate_micro_batch(p, cfg, rows_of(full, 0, 2), scale, g_acc, nullptr);
  l_acc += accumulate_micro_batch(p, cfg, rows_of(full, 2, 2), scale, g_acc, nullptr);
  EXPECT_NEAR(l_full, l_acc, 1e-10 * std::abs(l_full));
  // Relative to each tensor's own scale, floored at the global scale so
  // analytically zero gradients (attention key biases) compare as zero.
  double global = 0;
  for (const auto& t : g_full)
    for (double v : t.values()) global = std::max(global, std::abs(v));
  for (std::size_t i = 0; i < g_full.size(); ++i) {
    double mx = 0, diff = 0;
    for (std::size_t j = 0; j < g_full[i].size(); ++j) {
      mx = std::max(mx, std::abs(g_full[i][j]));
      diff = std::max(diff, std::abs(g_full[i][j] - g_acc[i][j]));
    }
    EXPECT_LE(diff, 1e-10 * std::max(mx, 1e-6 * global)) << p.names()[i];
  }
  // the optimiser sees the same gradients, so one Adam step agrees too
  auto pa = p, pb = p;
  auto sa = OptimState<double>::zeros(pa), sb = OptimState<double>::zeros(pb);
  adam_step(pa, g_full, sa, 1e-3);
  adam_step(pb, g_acc, sb, 1e-3);
  for (std::size_t i = 0; i < pa.size(); ++i)
    for (std::size_t j = 0; j < pa.tensors()[i].size(); ++j)
      EXPECT_NEAR(pa.tensors()[i][j], pb.tensors()[i][j], 1e-10);
}

INSTANTIATE_TEST_SUITE_P(Families, Accumulation,
                         ::testing::Values(Family::kGpt, Family::kQlstm, Family::kLstm),
                         [](const auto& info) { return family_name(info.param); });

TEST(Train, BookkeepingAndLog) {
  const auto cfg = small_config(Family::kGpt, 9);
  const auto c = markov_corpus(5000, 8, 1, 3);
  TrainOptions o;
  o.plan = {2, 16, 16, 2};
  o.steps = 10;
  o.log_interval = 3;
  o.reference_tps = 64.0;
  auto r = train(ModelParams<double>::init(cfg, 1), cfg, c, o);
  EXPECT_EQ(r.micro_batches, 20u);
  EXPECT_EQ(r.optim.step, 10u);
  std::vector<std::uint64_t> steps;
  for (const auto& rec : r.log.records()) {
    steps.push_back(rec.step);
    EXPECT_EQ(rec.tokens_seen, rec.step * 2 * 16 * 2);
    EXPECT_DOUBLE_EQ(*rec.accelerator_seconds, rec.tokens_seen / 64.0);
    EXPECT_TRUE(std::isfinite(rec.train_loss));
  }
  EXPECT_EQ(steps, (std::vector<std::uint64_t>{3, 6, 9, 10}));
  EXPECT_THROW(r.log.append(LogRecord{10}), Error);
  o.steps = 0;
  EXPECT_THROW(train(ModelParams<double>::init(cfg, 1), cfg, c, o), Error);
}

TEST(Train, WrapsTheStreamAndCountsEpochs) {
  const auto cfg = small_config(Family::kQlstm, 9);
  const auto c = markov_corpus(200, 8, 1, 3);  // (200 - 1) / 32 = 6 batches per epoch
  TrainOptions o;
  o.plan = {2, 16, 16, 1};
  o.steps = 14;
  o.log_interval = 1;
  auto r = train(ModelParams<double>::init(cfg, 1), cfg, c, o);
  EXPECT_EQ(r.epochs, 2u);
  EXPECT_EQ(r.log.records()[5].epoch, 0u);
  EXPECT_EQ(r.log.records()[6].epoch, 1u);
  EXPECT_EQ(r.log.records()[12].epoch, 2u);
}

TEST(Train, SameSeedGivesBitwiseIdenticalLogs) {
  for (auto fam : {Family::kGpt, Family::kQlstm}) {
    const auto cfg = small_config(fam, 9);
    const auto c = markov_corpus(4000, 8, 1, 3);
    const auto held = markov_corpus(1000, 8, 1, 4, "test");
    TrainOptions o;
    o.plan = {2, 16, 16, 1};
    o.steps = 6;
    o.log_interval = 2;
    o.eval_corpus = &held;
    o.byte_lengths.assign(9, 1);
    o.eval_batches = 2;
    o.eval_batch = 4;
    auto a = train(ModelParams<double>::init(cfg, 7), cfg, c, o);
    auto b = train(ModelParams<double>::init(cfg, 7), cfg, c, o);
    std::ostringstream sa, sb;
    a.log.write_jsonl(sa);
    b.log.write_jsonl(sb);
    EXPECT_EQ(sa.str(), sb.str());
    EXPECT_TRUE(a.log.records().back().eval_metric.has_value());
    auto d = train(ModelParams<double>::init(cfg, 8), cfg, c, o);
    EXPECT_FALSE(a.log == d.log);
  }
}

TEST(Train, NonFiniteStepsAreRejectedAndLogged) {
  const auto cfg = small_config(Family::kGpt, 9);
  const auto c = markov_corpus(4000, 8, 1, 3);
  auto p = ModelParams<double>::init(cfg, 1);
  p["ln_f.b"][0] = std::nan("");  // reaches every logit
  TrainOptions o;
  o.plan = {2, 16, 16, 1};
  o.steps = 3;
  auto r = train(p, cfg, c, o);
  EXPECT_EQ(r.incidents.size(), 3u);
  EXPECT_EQ(r.optim.step, 0u);
  EXPECT_TRUE(std::isnan(r.params["ln_f.b"][0]));
  EXPECT_EQ(r.params["head"].values(), p["head"].values());
}

TEST(Train, RejectsCorpusBeyondTheModelVocabulary) {
  const auto cfg = small_config(Family::kGpt, 5);
  TrainOptions o;
  o.plan = {2, 16, 16, 1};
  EXPECT_THROW(train(ModelParams<double>::init(cfg, 1), cfg, markov_corpus(4000, 8, 1, 3), o), Error);
}

TEST(Train, SmokeRunLearnsAndWritesACheckpoint) {
  // A recurrent desk-scale run on byte-level text: training loss falls,
  // held-out text scores better than the same text reversed, and
  // short-context predictions cost more than long-context ones.
  auto cfg = preset("qlstm-desk");
  cfg.vocab_size = 257;
  const auto c = byte_corpus(testing::zipf_text(200000, 3));
  const auto held = testing::zipf_text(20000, 4);
  const auto same = byte_corpus(held, "same");
  const auto other = byte_corpus(std::string(held.rbegin(), held.rend()), "other");
  const auto dir = std::filesystem::temp_directory_path() / "lmkit_train_smoke";
  std::filesystem::create_directories(dir);
  const auto ckpt = (dir / "model.lmkm").string();
  TrainOptions o;
  o.plan = {4, 64, 64, 1};
  o.steps = 150;
  o.lr0 = 3e-3;
  o.log_interval = 10;
  o.checkpoint_path = ckpt;
  o.vocab_hash = 5;
  const auto init = ModelParams<float>::init(cfg, 1);
  auto r = train(init, cfg, c, o);
  const auto& recs = r.log.records();
  EXPECT_LT(recs.back().train_loss, 0.9 * recs.front().train_loss);

  const std::vector<std::uint32_t> one(257, 1);
  const auto scorer = model_scorer(r.params, cfg);
  const auto rep_same = fast_eval(scorer, same, one, 64, 16, 20);
  const auto rep_other = fast_eval(scorer, other, one, 64, 16, 20);
  EXPECT_LT(rep_same.mean_loss(), rep_other.mean_loss());
  const auto slow = slow_eval(scorer, same, one, 64, 16, 16);
  EXPECT_GE(fast_eval(scorer, same, one, 64, 16, 0).mean_loss(), slow.mean_loss());

  const auto back = load_checkpoint<float>(ckpt);
  EXPECT_EQ(back.config, cfg);
  EXPECT_EQ(back.vocab_hash, 5u);
  EXPECT_EQ(back.extra["optimizer_step"], 150);
  EXPECT_EQ(back.params["head"].values(), r.params["head"].values());
  EXPECT_FALSE(std::filesystem::exists(ckpt + ".tmp"));
}

TEST(RunLog, JsonlRoundTrip) {
  RunLog log;
  LogRecord a{1, 64, 2.5};
  LogRecord b{2, 128, 2.0};
  b.eval_metric = 2.25;
  log.append(a);
  log.append(b);
  const auto path = (std::filesystem::temp_directory_path() / "lmkit_runlog.jsonl").string();
  log.save(path);
  EXPECT_TRUE(RunLog::load(path) == log);
  std::ofstream(path, std::ios::app) << "{\"step\": 1}\n";
  try {
    RunLog::load(path);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("line 3"), std::string::npos) << e.what();
  }
}

}  // namespace
}  // namespace lmkit
