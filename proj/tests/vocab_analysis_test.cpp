// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <random>
#include <set>
#include <sstream>

#include "lmkit/analysis/vocab_analysis.hpp"
#include "lmkit/tokenizer/bpe.hpp"
#include "support/synthetic.hpp"

namespace lmkit {
namespace {

// Byte base followed by the given extra tokens, no merges.
TokenVocabulary with_extras(const std::vector<Bytes>& extras) {
  std::vector<Bytes> tokens = TokenVocabulary::bytes_only().tokens();
  tokens.insert(tokens.end(), extras.begin(), extras.end());
  return TokenVocabulary::from_tokens(tokens);
}

FrequencyTable sample_zipf(std::size_t n, double exponent, std::size_t draws, std::uint64_t seed) {
  testing::ZipfSampler z(n, exponent);
  std::mt19937_64 rng(seed);
  std::vector<std::uint64_t> counts(n, 0);
  for (std::size_t i = 0; i < draws; ++i) ++counts[z(rng)];
  return FrequencyTable(std::move(counts));
}

TEST(FrequencyTable, CountsAndRanks) {
  std::vector<TokenId> stream{3, 1, 3, 0, 3, 1};
  auto f = FrequencyTable::count(stream, 5);
  EXPECT_EQ(f.total(), stream.size());
  EXPECT_EQ(f.ranked(), (std::vector<TokenId>{3, 1, 0, 2, 4}));
  EXPECT_EQ(f.sorted_counts(), (std::vector<std::uint64_t>{3, 2, 1, 0, 0}));
  EXPECT_EQ(f.nonzero(), 3u);
  std::vector<TokenId> bad{7};
  EXPECT_THROW(FrequencyTable::count(bad, 5), Error);
}

TEST(FrequencyTable, RanksArePermutation) {
  auto f = sample_zipf(500, 1.0, 10000, 1);
  std::set<TokenId> ids(f.ranked().begin(), f.ranked().end());
  EXPECT_EQ(ids.size(), 500u);
  std::uint64_t sum = 0;
  for (auto c : f.counts()) sum += c;
  EXPECT_EQ(sum, 10000u);
}

TEST(ExactDuplicates, PlantedPair) {
  // Id 7 and id 300 both decode to "ab"; every other slot is unique.
  std::vector<Bytes> tokens(301);
  tokens[7] = "ab";
  tokens[300] = "ab";
  std::size_t next_byte = 0, filler = 0;
  for (std::size_t i = 0; i < 300; ++i) {
    if (i == 7) continue;
    if (next_byte < 256)
      tokens[i] = Bytes(1, static_cast<char>(next_byte++));
    else
      tokens[i] = "zz" + std::to_string(filler++);
  }
  auto v = TokenVocabulary::from_tokens(tokens);
  auto groups = find_exact_duplicates(v);
  ASSERT_EQ(groups.size(), 1u);
  EXPECT_EQ(groups[0], (std::vector<TokenId>{7, 300}));
}

TEST(ExactDuplicates, NoneInTrainedVocab) {
  EXPECT_TRUE(find_exact_duplicates(TokenVocabulary::bytes_only()).empty());
}

TEST(ExactDuplicates, ThreePlantedPairsArePartitioned) {
  auto v = with_extras({"xy", "hello", "xy", "q!", "hello", "abc", "q!"});
  auto groups = find_exact_duplicates(v);
  ASSERT_EQ(groups.size(), 3u);
  std::set<TokenId> seen;
  for (const auto& g : groups) {
    EXPECT_GE(g.size(), 2u);
    for (TokenId id : g) EXPECT_TRUE(seen.insert(id).second) << id;
  }
}

TEST(ExactDuplicates, MergeOrderDuplicatesAreFound) {
  // "abc" reached both as (ab)c and a(bc).
  auto v = TokenVocabulary::from_merges({{'a', 'b'}, {'b', 'c'}, {256, 'c'}, {'a', 257}});
  auto groups = find_exact_duplicates(v);
  ASSERT_EQ(groups.size(), 1u);
  EXPECT_EQ(groups[0], (std::vector<TokenId>{258, 259}));
}

TEST(NearDuplicates, TheFamily) {
  auto v = with_extras({"the", " the", "The", " The", "THE", " THE", "dog"});
  auto r = find_near_duplicates(v);
  ASSERT_EQ(r.classes.size(), 1u);
  EXPECT_EQ(r.classes[0].normal_form, "the");
  EXPECT_EQ(r.classes[0].members.size(), 6u);
  EXPECT_EQ(r.near_duplicates, 5u);
}

TEST(NearDuplicates, OfFamily) {
  auto v = with_extras({"of", " of", "Of", " Of", "OF"});
  auto r = find_near_duplicates(v);
  ASSERT_EQ(r.classes.size(), 1u);
  EXPECT_EQ(r.classes[0].members.size(), 5u);
  EXPECT_EQ(r.near_duplicates, 4u);
}

TEST(NearDuplicates, PunctuationAndCounting) {
  auto v = with_extras({"end.", " end", "End", "(it", "it)", "--", " ,", "zeta"});
  auto r = find_near_duplicates(v);
  ASSERT_EQ(r.classes.size(), 2u);
  EXPECT_EQ(r.near_duplicates, 3u);
}

TEST(NearDuplicates, ClassFreeVocabulary) {
  EXPECT_EQ(find_near_duplicates(TokenVocabulary::bytes_only()).near_duplicates, 0u);
  EXPECT_EQ(find_near_duplicates(with_extras({"cat", "dog", "bird"})).near_duplicates, 0u);
}

TEST(Normalize, IdempotentOnRandomStrings) {
  std::mt19937_64 rng(2);
  for (int i = 0; i < 2000; ++i) {
    std::string s(rng() % 12, '\0');
    for (auto& c : s) c = static_cast<char>(rng() % 3 ? " .,TheOF\t!x"[rng() % 11] : rng() % 256);
    const auto once = normalize_token(s);
    EXPECT_EQ(normalize_token(once), once);
  }
  EXPECT_EQ(normalize_token("  The!\n"), "the");
}

TEST(ZipfFit, HarmonicSampleHasUnitExponent) {
  auto z = zipf_fit(sample_zipf(1000, 1.0, 1'000'000, 3));
  EXPECT_NEAR(z.exponent, 1.0, 0.05);
  EXPECT_TRUE(z.zipf_like);
  EXPECT_GT(z.r_squared, 0.95);
}

TEST(ZipfFit, InverseSquareSample) {
  auto z = zipf_fit(sample_zipf(100, 2.0, 1'000'000, 4));
  EXPECT_NEAR(z.exponent, 2.0, 0.1);
}

TEST(ZipfFit, UniformCountsAreNotZipf) {
  auto z = zipf_fit(FrequencyTable(std::vector<std::uint64_t>(50, 7)));
  EXPECT_NEAR(z.exponent, 0.0, 1e-12);
  EXPECT_FALSE(z.zipf_like);
}

TEST(ZipfFit, ExactPowerLawAndScaling) {
  std::vector<std::uint64_t> c;
  for (int r = 1; r <= 64; ++r) c.push_back(static_cast<std::uint64_t>(std::llround(4096.0 * 4096.0 / (r * r))));
  auto a = zipf_fit(FrequencyTable(c));
  EXPECT_NEAR(a.exponent, 2.0, 1e-4);
  for (auto& x : c) x *= 2;
  auto b = zipf_fit(FrequencyTable(c));
  EXPECT_NEAR(a.exponent, b.exponent, 1e-12);
  EXPECT_NEAR(b.intercept - a.intercept, std::log(2.0), 1e-12);
}

TEST(ZipfFit, ZeroTailIgnoredAndTooFewRejected) {
  std::vector<std::uint64_t> c;
  for (int r = 1; r <= 20; ++r) c.push_back(static_cast<std::uint64_t>(10000 / r));
  auto base = zipf_fit(FrequencyTable(c));
  c.resize(500, 0);
  auto tailed = zipf_fit(FrequencyTable(c));
  EXPECT_DOUBLE_EQ(base.exponent, tailed.exponent);
  EXPECT_EQ(tailed.points, 20u);
  EXPECT_THROW(zipf_fit(FrequencyTable(std::vector<std::uint64_t>{5, 4, 3})), Error);
}

TEST(Overlap, IdenticalAndByteBase) {
  auto a = train_bpe(testing::zipf_text(8000, 5), 400);
  auto same = vocab_overlap(a, a);
  EXPECT_EQ(same.shared, 400u);
  EXPECT_DOUBLE_EQ(same.fraction_of_a, 1.0);
  auto x = with_extras({"qq", "ww"});
  auto y = with_extras({"ee", "rr", "tt"});
  auto r = vocab_overlap(x, y);
  EXPECT_EQ(r.shared, 256u);
  EXPECT_DOUBLE_EQ(r.fraction_of_a, 256.0 / 258.0);
  EXPECT_DOUBLE_EQ(r.fraction_of_b, 256.0 / 259.0);
}

TEST(Overlap, DisjointHalvesShareCommonTokens) {
  const std::string text = testing::zipf_text(60000, 6);
  auto a = train_bpe(std::string_view(text).substr(0, 30000), 600);
  auto b = train_bpe(std::string_view(text).substr(30000), 600);
  std::set<Bytes> sa(a.tokens().begin(), a.tokens().end()), both;
  for (const auto& t : b.tokens())
    if (sa.count(t)) both.insert(t);
  auto r = vocab_overlap(a, b);
  EXPECT_EQ(r.shared, both.size());
  EXPECT_GT(r.shared, 256u);
  EXPECT_LT(r.shared, 600u);
}

TEST(Stability, IdenticalSubsetsHaveZeroDeviation) {
  auto f = sample_zipf(300, 1.0, 20000, 7);
  std::vector<FrequencyTable> subsets{f, f};
  auto r = frequency_stability(subsets);
  EXPECT_DOUBLE_EQ(r.max_deviation, 0.0);
}

TEST(Stability, SameSourceIsCloseUniformIsFar) {
  std::vector<FrequencyTable> same;
  for (std::uint64_t s = 0; s < 4; ++s) same.push_back(sample_zipf(1000, 1.0, 400000, 10 + s));
  auto close = frequency_stability(same);
  EXPECT_LT(close.max_deviation, 0.25);

  std::vector<std::uint64_t> flat(1000, 400);
  std::vector<FrequencyTable> mixed{same[0], FrequencyTable(flat)};
  auto far = frequency_stability(mixed);
  EXPECT_GT(far.max_deviation, 0.9);
  EXPECT_GT(far.max_deviation, 4 * close.max_deviation);
}

TEST(Stability, Rejections) {
  std::vector<FrequencyTable> one{sample_zipf(10, 1.0, 100, 1)};
  EXPECT_THROW(frequency_stability(one), Error);
  std::vector<FrequencyTable> empty{sample_zipf(10, 1.0, 100, 1),
                                    FrequencyTable(std::vector<std::uint64_t>(10, 0))};
  EXPECT_THROW(frequency_stability(empty), Error);
}

TEST(RankPercentile, Endpoints) {
  auto f = FrequencyTable(std::vector<std::uint64_t>{1, 6, 3, 0, 0});
  auto curve = rank_percentile_curve(f, 5);
  EXPECT_DOUBLE_EQ(curve[0], 0.6);
  EXPECT_DOUBLE_EQ(curve[1], 0.3);
  EXPECT_DOUBLE_EQ(curve[2], 0.1);
  EXPECT_DOUBLE_EQ(curve[4], 0.0);
}

TEST(Report, LineDelimitedRecords) {
  auto v = with_extras({"the", "The", "xy", "xy"});
  std::vector<TokenId> stream;
  for (TokenId i = 0; i < 40; ++i)
    for (TokenId k = 0; k <= i; ++k) stream.push_back(i);
  auto f = FrequencyTable::count(stream, v.size());
  std::ostringstream os;
  write_vocab_report(os, v, &f);
  std::istringstream is(os.str());
  std::vector<nlohmann::json> lines;
  for (std::string line; std::getline(is, line);) lines.push_back(nlohmann::json::parse(line));
  ASSERT_EQ(lines.size(), 4u);  // 1 exact group, 2 near classes ("the", "xy"), summary
  EXPECT_EQ(lines[0]["kind"], "exact_duplicate");
  EXPECT_EQ(lines.back()["kind"], "summary");
  EXPECT_EQ(lines.back()["near_duplicates"], 2);
  EXPECT_EQ(lines.back()["corpus_tokens"], stream.size());
  EXPECT_TRUE(lines.back().contains("zipf_exponent"));
}

}  // namespace
}  // namespace lmkit
