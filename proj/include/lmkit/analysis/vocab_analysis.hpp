// SPDX-License-Identifier: Apache-2.0
#pragma once

// Vocabulary forensics: duplicate and near-duplicate tokens, frequency and
// Zipf structure, overlap between vocabularies.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <map>
#include <ostream>
#include <span>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "json.hpp"
#include "lmkit/tokenizer/vocabulary.hpp"

namespace lmkit {

/// Per-id occurrence counts. rank 0 is the most frequent id; ties are broken
/// by ascending id so the ordering is a deterministic permutation.
class FrequencyTable {
 public:
  FrequencyTable() = default;
  explicit FrequencyTable(std::vector<std::uint64_t> counts) : counts_(std::move(counts)) {
    for (auto c : counts_) total_ += c;
    order_.resize(counts_.size());
    for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = static_cast<TokenId>(i);
    std::stable_sort(order_.begin(), order_.end(),
                     [this](TokenId a, TokenId b) { return counts_[a] > counts_[b]; });
  }

  static FrequencyTable count(std::span<const TokenId> stream, std::size_t vocab_size) {
    std::vector<std::uint64_t> counts(vocab_size, 0);
    for (std::size_t i = 0; i < stream.size(); ++i) {
      if (stream[i] >= vocab_size) {
        throw Error("frequency table: id " + std::to_string(stream[i]) + " at position " +
                    std::to_string(i) + " exceeds vocabulary size " + std::to_string(vocab_size));
      }
      ++counts[stream[i]];
    }
    return FrequencyTable(std::move(counts));
  }

  std::size_t size() const { return counts_.size(); }
  std::uint64_t total() const { return total_; }
  std::uint64_t count(TokenId id) const { return counts_.at(id); }
  const std::vector<std::uint64_t>& counts() const { return counts_; }
  /// Ids by descending count.
  const std::vector<TokenId>& ranked() const { return order_; }

  std::vector<std::uint64_t> sorted_counts() const {
    std::vector<std::uint64_t> out;
    out.reserve(order_.size());
    for (TokenId id : order_) out.push_back(counts_[id]);
    return out;
  }

  std::size_t nonzero() const {
    return static_cast<std::size_t>(
        std::count_if(counts_.begin(), counts_.end(), [](auto c) { return c > 0; }));
  }

  FrequencyTable& operator+=(const FrequencyTable& o) {
    if (o.size() != size()) {
      throw Error("frequency table: cannot pool sizes " + std::to_string(size()) + " and " +
                  std::to_string(o.size()));
    }
    std::vector<std::uint64_t> c = counts_;
    for (std::size_t i = 0; i < c.size(); ++i) c[i] += o.counts_[i];
    *this = FrequencyTable(std::move(c));
    return *this;
  }

 private:
  std::vector<std::uint64_t> counts_;
  std::vector<TokenId> order_;
  std::uint64_t total_ = 0;
};

// ---------------------------------------------------------------- duplicates

/// Groups of ids (ascending) whose byte strings are identical. Groups are
/// ordered by their smallest id.
inline std::vector<std::vector<TokenId>> find_exact_duplicates(const TokenVocabulary& vocab) {
  std::map<Bytes, std::vector<TokenId>> by_bytes;
  for (std::size_t i = 0; i < vocab.size(); ++i)
    by_bytes[vocab.tokens()[i]].push_back(static_cast<TokenId>(i));
  std::vector<std::vector<TokenId>> groups;
  for (auto& [bytes, ids] : by_bytes)
    if (ids.size() >= 2) groups.push_back(std::move(ids));
  std::sort(groups.begin(), groups.end());
  return groups;
}

inline bool is_ascii_punct(unsigned char c) { return c < 128 && std::ispunct(c); }
inline bool is_ascii_space(unsigned char c) {
  return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f';
}

/// Lowercase ASCII letters, drop every ASCII punctuation byte, then trim
/// surrounding whitespace. Non-ASCII bytes pass through untouched.
inline Bytes normalize_token(std::string_view s) {
  Bytes out;
  out.reserve(s.size());
  for (unsigned char c : s) {
    if (is_ascii_punct(c)) continue;
    out.push_back(static_cast<char>(c < 128 ? std::tolower(c) : c));
  }
  std::size_t b = 0, e = out.size();
  while (b < e && is_ascii_space(static_cast<unsigned char>(out[b]))) ++b;
  while (e > b && is_ascii_space(static_cast<unsigned char>(out[e - 1]))) --e;
  return out.substr(b, e - b);
}

struct NearDuplicateClass {
  Bytes normal_form;
  std::vector<TokenId> members;
};

struct NearDuplicateReport {
  std::vector<NearDuplicateClass> classes;
  /// Sum over classes of (members - 1): every member beyond the first is
  /// counted as one redundant token.
  std::size_t near_duplicates = 0;
};

/// Classes of at least two tokens sharing a normal form. Two kinds of token
/// are left out: single bytes (the fallback alphabet is always present, so
/// 'a'/'A' would otherwise form a class in every vocabulary) and tokens that
/// normalise to nothing (pure whitespace or punctuation).
inline NearDuplicateReport find_near_duplicates(const TokenVocabulary& vocab) {
  std::map<Bytes, std::vector<TokenId>> by_norm;
  for (std::size_t i = 0; i < vocab.size(); ++i) {
    if (vocab.tokens()[i].size() < 2) continue;
    Bytes n = normalize_token(vocab.tokens()[i]);
    if (!n.empty()) by_norm[std::move(n)].push_back(static_cast<TokenId>(i));
  }
  NearDuplicateReport r;
  for (auto& [norm, ids] : by_norm) {
    if (ids.size() < 2) continue;
    r.near_duplicates += ids.size() - 1;
    r.classes.push_back({norm, std::move(ids)});
  }
  return r;
}

// ---------------------------------------------------------------- zipf

struct ZipfFit {
  double exponent = 0;   // -slope of log count against log rank
  double intercept = 0;  // log count at rank 1
  double r_squared = 0;
  std::size_t points = 0;
  /// Exponent at least 0.5 with R^2 at least 0.8. Flat curves (every count
  /// equal) have no variance to explain and are never Zipf-like.
  bool zipf_like = false;
};

/// Least squares of log(count) on log(rank) over ranks with nonzero counts.
inline ZipfFit zipf_fit(const FrequencyTable& freq) {
  const auto sorted = freq.sorted_counts();
  std::vector<double> x, y;
  for (std::size_t r = 0; r < sorted.size() && sorted[r] > 0; ++r) {
    x.push_back(std::log(static_cast<double>(r + 1)));
    y.push_back(std::log(static_cast<double>(sorted[r])));
  }
  if (x.size() < 10) {
    throw Error("zipf_fit: need at least 10 tokens with nonzero count, got " +
                std::to_string(x.size()));
  }
  const double n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxx = 0, sxy = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    sxy += (x[i] - mx) * (y[i] - my);
    syy += (y[i] - my) * (y[i] - my);
  }
  ZipfFit f;
  const double slope = sxy / sxx;
  f.exponent = -slope;
  f.intercept = my - slope * mx;
  f.points = x.size();
  if (syy > 0) {
    double ss_res = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double e = y[i] - (f.intercept + slope * x[i]);
      ss_res += e * e;
    }
    f.r_squared = 1.0 - ss_res / syy;
    f.zipf_like = f.exponent >= 0.5 && f.r_squared >= 0.8;
  }
  return f;
}

// ---------------------------------------------------------------- overlap

struct OverlapReport {
  std::size_t shared = 0;
  double fraction_of_a = 0;
  double fraction_of_b = 0;
};

/// Distinct byte strings present in both vocabularies.
inline OverlapReport vocab_overlap(const TokenVocabulary& a, const TokenVocabulary& b) {
  std::unordered_set<std::string_view> in_b(b.tokens().begin(), b.tokens().end());
  std::unordered_set<std::string_view> seen;
  OverlapReport r;
  for (const auto& t : a.tokens())
    if (in_b.count(t) && seen.insert(t).second) ++r.shared;
  std::unordered_set<std::string_view> distinct_a(a.tokens().begin(), a.tokens().end());
  r.fraction_of_a = static_cast<double>(r.shared) / static_cast<double>(distinct_a.size());
  r.fraction_of_b = static_cast<double>(r.shared) / static_cast<double>(in_b.size());
  return r;
}

// ---------------------------------------------------------------- stability

/// Proportion of the corpus held by the token at each rank percentile
/// 0, 100/(points-1), ..., 100. Rank percentile p maps to sorted index
/// round(p/100 * (size-1)), which lets vocabularies of different sizes share
/// one axis.
inline std::vector<double> rank_percentile_curve(const FrequencyTable& freq,
                                                 std::size_t points = 101) {
  if (freq.total() == 0) throw Error("rank_percentile_curve: empty frequency table");
  if (points < 2) throw Error("rank_percentile_curve: need at least 2 points");
  const auto sorted = freq.sorted_counts();
  std::vector<double> out(points);
  const double last = static_cast<double>(sorted.size() - 1);
  for (std::size_t k = 0; k < points; ++k) {
    const double frac = static_cast<double>(k) / static_cast<double>(points - 1);
    const auto idx = static_cast<std::size_t>(std::lround(frac * last));
    out[k] = static_cast<double>(sorted[idx]) / static_cast<double>(freq.total());
  }
  return out;
}

struct StabilityReport {
  /// Per subset: max over percentiles of |p_subset - p_pooled| / p_pooled,
  /// taken where the pooled curve is positive.
  std::vector<double> deviation;
  double max_deviation = 0;
};

inline StabilityReport frequency_stability(std::span<const FrequencyTable> subsets,
                                           std::size_t points = 101) {
  if (subsets.size() < 2) throw Error("frequency_stability: need at least 2 subsets");
  FrequencyTable pooled = subsets[0];
  for (std::size_t i = 0; i < subsets.size(); ++i) {
    if (subsets[i].total() == 0)
      throw Error("frequency_stability: subset " + std::to_string(i) + " is empty");
    if (i) pooled += subsets[i];
  }
  const auto ref = rank_percentile_curve(pooled, points);
  StabilityReport r;
  for (const auto& s : subsets) {
    const auto cur = rank_percentile_curve(s, points);
    double dev = 0;
    for (std::size_t k = 0; k < points; ++k)
      if (ref[k] > 0) dev = std::max(dev, std::abs(cur[k] - ref[k]) / ref[k]);
    r.deviation.push_back(dev);
    r.max_deviation = std::max(r.max_deviation, dev);
  }
  return r;
}

// ---------------------------------------------------------------- report

/// One JSON object per line: each duplicate group, each near-duplicate
/// class, then a summary record (with a Zipf fit when counts are given).
inline void write_vocab_report(std::ostream& os, const TokenVocabulary& vocab,
                               const FrequencyTable* freq = nullptr) {
  using nlohmann::json;
  const auto dups = find_exact_duplicates(vocab);
  std::size_t dup_tokens = 0;
  for (const auto& g : dups) {
    dup_tokens += g.size() - 1;
    os << json{{"kind", "exact_duplicate"}, {"hex", to_hex(vocab.token(g[0]))}, {"ids", g}}.dump()
       << '\n';
  }
  const auto near = find_near_duplicates(vocab);
  for (const auto& c : near.classes) {
    json members = json::array();
    for (TokenId id : c.members) members.push_back(json{{"id", id}, {"hex", to_hex(vocab.token(id))}});
    os << json{{"kind", "near_duplicate"}, {"normal_form_hex", to_hex(c.normal_form)},
               {"members", members}}.dump()
       << '\n';
  }
  json summary{{"kind", "summary"},
               {"vocab_size", vocab.size()},
               {"vocab_hash", vocab.hash()},
               {"exact_duplicate_groups", dups.size()},
               {"exact_duplicate_tokens", dup_tokens},
               {"near_duplicate_classes", near.classes.size()},
               {"near_duplicates", near.near_duplicates}};
  if (freq) {
    summary["corpus_tokens"] = freq->total();
    summary["unused_tokens"] = freq->size() - freq->nonzero();
    if (freq->nonzero() >= 10) {
      const auto z = zipf_fit(*freq);
      summary["zipf_exponent"] = z.exponent;
      summary["zipf_intercept"] = z.intercept;
      summary["zipf_r_squared"] = z.r_squared;
      summary["zipf_like"] = z.zipf_like;
    }
  }
  os << summary.dump() << '\n';
}

}  // namespace lmkit
