// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"
#include "lmkit/lmkit.hpp"
#include "support/synthetic.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace lmkit {
namespace {

struct Run {
  int code = -1;
  std::string output;
};

Run lmkit_cli(const std::string& args) {
  const std::string cmd = std::string(LMKIT_CLI_PATH) + " " + args + " 2>&1";
  Run r;
  FILE* p = popen(cmd.c_str(), "r");
  if (!p) return r;
  char buf[4096];
  std::size_t n;
  while ((n = fread(buf, 1, sizeof buf, p)) > 0) r.output.append(buf, n);
  const int status = pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

json read_json(const fs::path& p) { return json::parse(slurp(p)); }

std::vector<json> read_jsonl(const fs::path& p) {
  std::vector<json> out;
  std::istringstream is(slurp(p));
  std::string line;
  while (std::getline(is, line))
    if (!line.empty()) out.push_back(json::parse(line));
  return out;
}

class Cli : public ::testing::Test {
 protected:
  static fs::path root;
  static std::string out;  // "--out <root>/runs"
  static std::string vocab, train_corpus, test_corpus;

  static void SetUpTestSuite() {
    root = fs::temp_directory_path() / ("lmkit_cli_test_" + std::to_string(::getpid()));
    fs::remove_all(root);
    fs::create_directories(root / "text");
    for (int i = 0; i < 12; ++i) {
      std::ofstream(root / "text" / ("doc" + std::to_string(10 + i) + ".txt"))
          << testing::zipf_text(4000, static_cast<std::uint64_t>(i));
    }
    out = "--out " + (root / "runs").string();
    const auto t = (root / "text").string();
    ASSERT_EQ(lmkit_cli(out + " vocab-train --input " + t + " --size 512").code, 0);
    vocab = (root / "runs" / "vocab-train" / "vocab.txt").string();
    ASSERT_EQ(lmkit_cli(out + " corpus-build --vocab " + vocab + " --input " + t + " --test-docs 2 --seed 1").code, 0);
    train_corpus = (root / "runs" / "corpus-build" / "train.lmkc").string();
    test_corpus = (root / "runs" / "corpus-build" / "test.lmkc").string();
  }

  static void TearDownTestSuite() { fs::remove_all(root); }

  static fs::path run_dir(const std::string& name) { return root / "runs" / name; }
  static std::string fixture(const std::string& name) { return std::string(LMKIT_FIXTURES) + "/" + name; }
};

fs::path Cli::root;
std::string Cli::out, Cli::vocab, Cli::train_corpus, Cli::test_corpus;

TEST_F(Cli, VocabTrainWritesTheRequestedSize) {
  EXPECT_EQ(TokenVocabulary::load_file(vocab).size(), 512u);
  const auto info = read_json(run_dir("vocab-train") / "vocab.json");
  EXPECT_EQ(info["size"], 512);
  const auto cfg = read_json(run_dir("vocab-train") / "config.json");
  EXPECT_EQ(cfg["command"], "vocab-train");
  EXPECT_EQ(cfg["options"]["size"], "512");
}

TEST_F(Cli, VocabAnalyzeListsExactlyThePlantedGroups) {
  std::vector<Bytes> tokens = TokenVocabulary::bytes_only().tokens();
  for (const char* t : {"the", " the", "The", " The", "THE", "the.", "xq", "xq", "zebra"}) tokens.push_back(t);
  const auto planted = (root / "planted.txt").string();
  TokenVocabulary::from_tokens(tokens).save_file(planted);
  const auto r = lmkit_cli(out + " --name planted vocab-analyze --vocab " + planted + " --compare " + planted);
  ASSERT_EQ(r.code, 0) << r.output;
  std::vector<json> exact, near;
  json overlap;
  for (const auto& rec : read_jsonl(run_dir("planted") / "report.jsonl")) {
    if (rec["kind"] == "exact_duplicate") exact.push_back(rec);
    if (rec["kind"] == "near_duplicate") near.push_back(rec);
    if (rec["kind"] == "overlap") overlap = rec;
  }
  ASSERT_EQ(exact.size(), 1u);
  EXPECT_EQ(exact[0]["ids"], json({262, 263}));
  ASSERT_EQ(near.size(), 2u);
  std::set<std::size_t> sizes = {near[0]["members"].size(), near[1]["members"].size()};
  EXPECT_EQ(sizes, (std::set<std::size_t>{2, 6}));  // the "the" family is one class of six
  EXPECT_DOUBLE_EQ(overlap["fraction_of_a"].get<double>(), 1.0);
}

TEST_F(Cli, VocabAnalyzeCountsTokensOnACorpus) {
  const auto r = lmkit_cli(out + " --name counted vocab-analyze --vocab " + vocab + " --corpus " +
                           (root / "text").string());
  ASSERT_EQ(r.code, 0) << r.output;
  bool summary_has_zipf = false, has_bpt = false;
  for (const auto& rec : read_jsonl(run_dir("counted") / "report.jsonl")) {
    if (rec["kind"] == "summary") summary_has_zipf = rec.contains("zipf_exponent");
    if (rec["kind"] == "bytes_per_token") has_bpt = rec["bytes_per_token"].get<double>() > 1.0;
  }
  EXPECT_TRUE(summary_has_zipf);
  EXPECT_TRUE(has_bpt);
}

TEST_F(Cli, CorpusBuildSplitsAndTagsTheVocabulary) {
  const auto train = read_corpus(train_corpus), test = read_corpus(test_corpus);
  const auto v = TokenVocabulary::load_file(vocab);
  EXPECT_EQ(train.vocab_hash(), v.hash());
  EXPECT_EQ(test.num_documents(), 2u);
  EXPECT_EQ(train.num_documents(), 10u);
  EXPECT_EQ(train.id_limit(), 513u);
}

TEST_F(Cli, TrainUnderAComputeBudgetIsReproducible) {
  const std::string args = " train --preset qlstm-desk --corpus " + train_corpus + " --vocab " + vocab +
                           " --hours 0.001 --tps 1000 --batch 4 --log-interval 2 --seed 3";
  ASSERT_EQ(lmkit_cli(out + " --name run_a" + args).code, 0);
  ASSERT_EQ(lmkit_cli(out + " --name run_b" + args).code, 0);
  const auto log = RunLog::load((run_dir("run_a") / "log.jsonl").string());
  ASSERT_FALSE(log.empty());
  EXPECT_EQ(log.records().back().step, 14u);  // floor(3600 * 0.001 * 1000 / 256)
  for (std::size_t i = 1; i < log.size(); ++i) EXPECT_GT(log.records()[i].step, log.records()[i - 1].step);
  EXPECT_TRUE(fs::exists(run_dir("run_a") / "model.lmkm"));
  EXPECT_EQ(read_json(run_dir("run_a") / "budget.json")["steps"], 14);
  EXPECT_EQ(slurp(run_dir("run_a") / "log.jsonl"), slurp(run_dir("run_b") / "log.jsonl"));
  EXPECT_EQ(slurp(run_dir("run_a") / "model.lmkm"), slurp(run_dir("run_b") / "model.lmkm"));
  const auto cfg = read_json(run_dir("run_a") / "config.json");
  EXPECT_EQ(cfg["options"]["preset"], "qlstm-desk");
  EXPECT_EQ(cfg["options"]["hours"], "0.001");
  EXPECT_EQ(cfg["options"]["carry-state"], false);
}

TEST_F(Cli, SlowEvalReportsLongContext) {
  ASSERT_EQ(lmkit_cli(out + " --name long train --preset qlstm-desk --corpus " + train_corpus + " --vocab " + vocab +
                      " --seq 512 --batch 1 --steps 1")
                .code,
            0);
  const auto ck = (run_dir("long") / "model.lmkm").string();
  const auto r = lmkit_cli(out + " --name slow eval --checkpoint " + ck + " --vocab " + vocab + " --corpus " +
                           test_corpus + " --corpus " + train_corpus + " --protocol slow --stride 128");
  ASSERT_EQ(r.code, 0) << r.output;
  const auto reps = read_jsonl(run_dir("slow") / "eval.jsonl");
  ASSERT_EQ(reps.size(), 2u);
  for (const auto& rep : reps) {
    EXPECT_EQ(rep["protocol"], "slow");
    EXPECT_EQ(rep["min_context"], 384);
  }
  EXPECT_EQ(reps[0]["split"], "test");
  EXPECT_EQ(reps[1]["split"], "train");
  EXPECT_NE(r.output.find("normalised perplexity"), std::string::npos);
}

TEST_F(Cli, EvalRejectsAForeignVocabulary) {
  ASSERT_EQ(lmkit_cli(out + " --name v300 vocab-train --input " + (root / "text").string() + " --size 300").code, 0);
  ASSERT_EQ(lmkit_cli(out + " --name short train --preset gpt-desk --corpus " + train_corpus + " --vocab " + vocab +
                      " --steps 1 --batch 1")
                .code,
            0);
  const auto r = lmkit_cli(out + " --name bad eval --checkpoint " + (run_dir("short") / "model.lmkm").string() +
                           " --vocab " + (run_dir("v300") / "vocab.txt").string() + " --corpus " + test_corpus);
  EXPECT_NE(r.code, 0);
  EXPECT_NE(r.output.find("vocabulary"), std::string::npos) << r.output;
  const auto t = lmkit_cli(out + " --name bad2 train --preset gpt-desk --corpus " + train_corpus + " --vocab " +
                           (run_dir("v300") / "vocab.txt").string() + " --steps 1");
  EXPECT_NE(t.code, 0);
}

TEST_F(Cli, PlanReproducesTheSixHourBudget) {
  const auto r = lmkit_cli(out + " --name six plan --tps 55416 --hours 6 --tokens-per-step 65536 --preset gpt-small "
                                 "--convert 135107,43839");
  ASSERT_EQ(r.code, 0) << r.output;
  const auto b = read_json(run_dir("six") / "budget.json");
  EXPECT_NEAR(b["total_tokens"].get<double>(), 1.197e9, 1e6);
  EXPECT_NEAR(b["conversions"][0]["hours"].get<double>(), 2.46, 0.0246);
  EXPECT_NEAR(b["conversions"][1]["hours"].get<double>(), 7.58, 0.0758);
  EXPECT_NEAR(b["total_training_flops"].get<double>(), 0.769e18, 0.01 * 0.769e18);
}

TEST_F(Cli, FitReproducesThePublishedSlopeAndIntersects) {
  const auto r = lmkit_cli(out + " --name fit fit --records " + fixture("gpt_hours.txt") + " --compare " +
                           fixture("qlstm_hours.txt"));
  ASSERT_EQ(r.code, 0) << r.output;
  const auto j = read_json(run_dir("fit") / "fit.json");
  EXPECT_NEAR(j["fit"]["slope"].get<double>(), -0.082, 0.001);
  EXPECT_NEAR(j["fit"]["intercept"].get<double>(), 2.406, 0.005);
  EXPECT_NEAR(j["compare_fit"]["slope"].get<double>(), -0.112, 0.003);
  EXPECT_GT(j["intersection"]["intersection"].get<double>(), 1e4);
  for (const char* f : {"points.txt", "line.txt", "compare_points.txt", "compare_line.txt"})
    EXPECT_TRUE(fs::exists(run_dir("fit") / f)) << f;
}

TEST_F(Cli, FitRejectsTooFewOrMalformedRecords) {
  const auto two = (root / "two.txt").string();
  std::ofstream(two) << "6 2.2\n12 2.1\n";
  auto r = lmkit_cli(out + " --name f2 fit --records " + two);
  EXPECT_NE(r.code, 0);
  EXPECT_NE(r.output.find("at least 3"), std::string::npos) << r.output;
  const auto bad = (root / "bad.txt").string();
  std::ofstream(bad) << "# header\n6 2.2\n12 two\n24 2.0\n";
  r = lmkit_cli(out + " --name f3 fit --records " + bad);
  EXPECT_NE(r.code, 0);
  EXPECT_NE(r.output.find("line 3"), std::string::npos) << r.output;
}

TEST_F(Cli, ThroughputWritesAReport) {
  const auto r = lmkit_cli(out + " --name tp throughput --preset gpt-desk --vocab-size 512 --batches 1,2 "
                                 "--warmup 1 --timed 2");
  ASSERT_EQ(r.code, 0) << r.output;
  const auto j = read_json(run_dir("tp") / "throughput.json");
  EXPECT_GT(j["best_tokens_per_second"].get<double>(), 0.0);
  EXPECT_EQ(j["entries"].size(), 2u);
  EXPECT_EQ(j["deterministic"], false);
}

TEST_F(Cli, UnknownOptionsAndConfigKeysAreRejected) {
  EXPECT_NE(lmkit_cli(out + " plan --tps 1 --hours 1 --tokens-per-step 1 --colour red").code, 0);
  EXPECT_NE(lmkit_cli(out + " vocab-train").code, 0);
  EXPECT_NE(lmkit_cli("").code, 0);
  const auto good = (root / "good.toml").string(), bad = (root / "bad.toml").string();
  std::ofstream(good) << "[plan]\ntps = 3600\nhours = 1\ntokens-per-step = 3600\n";
  std::ofstream(bad) << "[plan]\ntps = 3600\nhours = 1\ntokens-per-step = 3600\nspeed = 9\n";
  const auto ok = lmkit_cli(out + " --name cfg --config " + good + " plan");
  EXPECT_EQ(ok.code, 0) << ok.output;
  EXPECT_EQ(read_json(run_dir("cfg") / "budget.json")["steps"], 3600);
  EXPECT_NE(lmkit_cli(out + " --name cfg_bad --config " + bad + " plan").code, 0);
}

TEST_F(Cli, OutputRootComesFromTheEnvironment) {
  const auto env_root = root / "env_runs";
  ::setenv("LMKIT_OUT", env_root.c_str(), 1);
  const auto e = lmkit_cli("--name envplan plan --tps 1 --hours 1 --tokens-per-step 1");
  ::unsetenv("LMKIT_OUT");
  ASSERT_EQ(e.code, 0) << e.output;
  EXPECT_TRUE(fs::exists(env_root / "envplan" / "budget.json"));
  EXPECT_TRUE(fs::exists(env_root / "envplan" / "config.json"));
}

}  // namespace
}  // namespace lmkit
