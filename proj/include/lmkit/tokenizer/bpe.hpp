// SPDX-License-Identifier: Apache-2.0
#pragma once

// Byte-level byte-pair encoding. No pre-tokenisation: whitespace and
// punctuation are ordinary bytes, so merges may span word boundaries.

#include <cstdint>
#include <queue>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "lmkit/tokenizer/vocabulary.hpp"

namespace lmkit {

namespace bpe_detail {

// Doubly linked list of symbols over one or more documents. A pair never
// spans two documents because document ends terminate the list.
struct SymbolList {
  std::vector<TokenId> sym;
  std::vector<std::int64_t> prev, next;
  std::vector<char> alive;

  void build(std::span<const std::string_view> docs, const TokenVocabulary& vocab) {
    std::size_t n = 0;
    for (auto d : docs) n += d.size();
    sym.reserve(n);
    prev.reserve(n);
    next.reserve(n);
    alive.assign(n, 1);
    for (auto d : docs) {
      const std::int64_t start = static_cast<std::int64_t>(sym.size());
      for (std::size_t i = 0; i < d.size(); ++i) {
        sym.push_back(vocab.byte_id(static_cast<unsigned char>(d[i])));
        const std::int64_t pos = start + static_cast<std::int64_t>(i);
        prev.push_back(i == 0 ? -1 : pos - 1);
        next.push_back(i + 1 == d.size() ? -1 : pos + 1);
      }
    }
  }

  // Replaces the pair starting at p with `merged`, unlinking the right symbol.
  void merge_at(std::int64_t p, TokenId merged) {
    const std::int64_t q = next[p];
    sym[p] = merged;
    next[p] = next[q];
    if (next[q] >= 0) prev[next[q]] = p;
    alive[q] = 0;
  }
};

inline std::uint64_t key(TokenId l, TokenId r) {
  return (static_cast<std::uint64_t>(l) << 32) | r;
}

}  // namespace bpe_detail

/// Trains a vocabulary of exactly target_size tokens: the 256 bytes plus
/// target_size - 256 merges. Each round merges the most frequent adjacent
/// pair; ties go to the lexicographically smallest (left bytes, right bytes).
inline TokenVocabulary train_bpe(std::span<const std::string_view> documents,
                                 std::size_t target_size) {
  using namespace bpe_detail;
  if (target_size < 257) {
    throw Error("train_bpe: target size must be at least 257, got " + std::to_string(target_size));
  }
  std::size_t total = 0;
  for (auto d : documents) total += d.size();
  if (total < 2) throw Error("train_bpe: corpus must contain at least 2 bytes");

  TokenVocabulary vocab = TokenVocabulary::bytes_only();
  SymbolList list;
  list.build(documents, vocab);

  std::unordered_map<std::uint64_t, std::int64_t> counts;
  std::unordered_map<std::uint64_t, std::vector<std::int64_t>> where;
  for (std::int64_t p = 0; p < static_cast<std::int64_t>(list.sym.size()); ++p) {
    if (list.next[p] < 0) continue;
    const auto k = key(list.sym[p], list.sym[list.next[p]]);
    ++counts[k];
    where[k].push_back(p);
  }

  struct Candidate {
    std::int64_t count;
    TokenId left, right;
  };
  const auto& toks = vocab.tokens();
  auto worse = [&toks](const Candidate& a, const Candidate& b) {
    if (a.count != b.count) return a.count < b.count;
    const int cl = toks[a.left].compare(toks[b.left]);
    if (cl != 0) return cl > 0;
    const int cr = toks[a.right].compare(toks[b.right]);
    if (cr != 0) return cr > 0;
    if (a.left != b.left) return a.left > b.left;
    return a.right > b.right;
  };
  std::priority_queue<Candidate, std::vector<Candidate>, decltype(worse)> heap(worse);
  for (const auto& [k, c] : counts) {
    heap.push({c, static_cast<TokenId>(k >> 32), static_cast<TokenId>(k & 0xffffffffu)});
  }

  auto bump = [&](TokenId l, TokenId r, std::int64_t delta, std::int64_t pos) {
    const auto k = key(l, r);
    const std::int64_t c = (counts[k] += delta);
    if (delta > 0) where[k].push_back(pos);
    if (c > 0) heap.push({c, l, r});
  };

  while (vocab.size() < target_size) {
    // Skip stale heap entries whose count no longer matches.
    bool found = false;
    Candidate best{};
    while (!heap.empty()) {
      best = heap.top();
      heap.pop();
      auto it = counts.find(key(best.left, best.right));
      if (it != counts.end() && it->second == best.count && best.count > 0) {
        found = true;
        break;
      }
    }
    if (!found) {
      throw Error("train_bpe: corpus ran out of pairs at vocabulary size " +
                  std::to_string(vocab.size()) + " (target " + std::to_string(target_size) + ")");
    }
    const TokenId a = best.left, b = best.right;
    vocab.append_merge(a, b);
    const TokenId merged = static_cast<TokenId>(vocab.size() - 1);

    auto positions = std::move(where[key(a, b)]);
    where.erase(key(a, b));
    std::sort(positions.begin(), positions.end());
    positions.erase(std::unique(positions.begin(), positions.end()), positions.end());
    for (std::int64_t p : positions) {
      if (!list.alive[p] || list.sym[p] != a) continue;
      const std::int64_t q = list.next[p];
      if (q < 0 || list.sym[q] != b) continue;
      const std::int64_t before = list.prev[p];
      const std::int64_t after = list.next[q];
      if (before >= 0) bump(list.sym[before], a, -1, before);
      if (after >= 0) bump(b, list.sym[after], -1, q);
      counts[key(a, b)] -= 1;
      list.merge_at(p, merged);
      if (before >= 0) bump(list.sym[before], merged, +1, before);
      if (after >= 0) bump(merged, list.sym[after], +1, p);
    }
    counts.erase(key(a, b));
  }
  return vocab;
}

inline TokenVocabulary train_bpe(std::string_view corpus, std::size_t target_size) {
  const std::string_view docs[] = {corpus};
  return train_bpe(std::span<const std::string_view>(docs), target_size);
}

/// Applies the merge rules in creation order. Implemented with a priority
/// queue keyed by (merge rank, position), which visits merges in exactly the
/// order a left-to-right replay of each rule in turn would.
inline std::vector<TokenId> encode(std::string_view text, const TokenVocabulary& vocab) {
  using namespace bpe_detail;
  SymbolList list;
  const std::string_view docs[] = {text};
  list.build(docs, vocab);
  if (vocab.merges().empty() || text.size() < 2) return list.sym;

  struct Entry {
    std::uint32_t rank;
    std::int64_t pos;
    bool operator>(const Entry& o) const {
      return rank != o.rank ? rank > o.rank : pos > o.pos;
    }
  };
  std::priority_queue<Entry, std::vector<Entry>, std::greater<>> heap;
  auto consider = [&](std::int64_t p) {
    if (p < 0 || list.next[p] < 0) return;
    if (auto r = vocab.merge_rank(list.sym[p], list.sym[list.next[p]])) heap.push({*r, p});
  };
  for (std::int64_t p = 0; p + 1 < static_cast<std::int64_t>(list.sym.size()); ++p) consider(p);

  const auto& merges = vocab.merges();
  while (!heap.empty()) {
    const Entry e = heap.top();
    heap.pop();
    const std::int64_t p = e.pos;
    if (!list.alive[p] || list.next[p] < 0) continue;
    const MergeRule& m = merges[e.rank];
    if (list.sym[p] != m.left || list.sym[list.next[p]] != m.right) continue;
    list.merge_at(p, m.result);
    consider(list.prev[p]);
    consider(p);
  }
  std::vector<TokenId> out;
  out.reserve(list.sym.size());
  for (std::size_t i = 0; i < list.sym.size(); ++i)
    if (list.alive[i]) out.push_back(list.sym[i]);
  return out;
}

inline Bytes decode(std::span<const TokenId> ids, const TokenVocabulary& vocab) {
  Bytes out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= vocab.size()) {
      throw Error("decode: id " + std::to_string(ids[i]) + " at position " + std::to_string(i) +
                  " is outside the vocabulary (size " + std::to_string(vocab.size()) + ")");
    }
    out += vocab.tokens()[ids[i]];
  }
  return out;
}

/// Decoded byte length divided by token count.
inline double bytes_per_token(std::span<const TokenId> ids, const TokenVocabulary& vocab) {
  if (ids.empty()) throw Error("bytes_per_token: empty token sequence");
  std::size_t bytes = 0;
  for (TokenId id : ids) bytes += vocab.token(id).size();
  return static_cast<double>(bytes) / static_cast<double>(ids.size());
}

}  // namespace lmkit
