// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <fstream>
#include <istream>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "lmkit/numerics/tensor.hpp"

namespace lmkit {

/// Binary-safe byte string. std::string is used purely as a byte container.
using Bytes = std::string;

struct MergeRule {
  TokenId left = 0;
  TokenId right = 0;
  TokenId result = 0;
};

inline std::string to_hex(std::string_view bytes) {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string out;
  out.reserve(bytes.size() * 2);
  for (unsigned char c : bytes) {
    out.push_back(kDigits[c >> 4]);
    out.push_back(kDigits[c & 15]);
  }
  return out;
}

inline std::optional<Bytes> from_hex(std::string_view hex) {
  auto nibble = [](char c) -> int {
    if (c >= '0' && c <= '9') return c - '0';
    if (c >= 'a' && c <= 'f') return c - 'a' + 10;
    if (c >= 'A' && c <= 'F') return c - 'A' + 10;
    return -1;
  };
  if (hex.size() % 2) return std::nullopt;
  Bytes out;
  for (std::size_t i = 0; i < hex.size(); i += 2) {
    const int hi = nibble(hex[i]), lo = nibble(hex[i + 1]);
    if (hi < 0 || lo < 0) return std::nullopt;
    out.push_back(static_cast<char>(hi * 16 + lo));
  }
  return out;
}

inline std::uint64_t fnv1a(std::string_view data,
                           std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : data) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Ordered id -> byte-string table plus the ordered merge rules that built it.
///
/// Ids are dense. Every one of the 256 single bytes has an id, so any byte
/// string is encodable. Merge i produces id size() - merges().size() + i,
/// i.e. merged tokens occupy the tail of the table in creation order.
/// Distinct ids may decode to the same bytes (BPE can reach one string
/// through different merge orders); those are kept as separate ids.
class TokenVocabulary {
 public:
  /// The 256 single-byte tokens, id == byte value.
  static TokenVocabulary bytes_only() {
    std::vector<Bytes> tokens;
    for (int b = 0; b < 256; ++b) tokens.emplace_back(1, static_cast<char>(b));
    return TokenVocabulary(std::move(tokens), {});
  }

  /// Replays (left, right) id pairs on top of the byte base.
  static TokenVocabulary from_merges(const std::vector<std::pair<TokenId, TokenId>>& pairs) {
    TokenVocabulary v = bytes_only();
    for (auto [l, r] : pairs) v.append_merge(l, r);
    return v;
  }

  /// Arbitrary table, e.g. one exported from another tokeniser. The last
  /// merges.size() entries must be the merge products in order.
  static TokenVocabulary from_tokens(std::vector<Bytes> tokens,
                                     std::vector<std::pair<TokenId, TokenId>> merges = {}) {
    if (merges.size() > tokens.size()) throw Error("vocabulary: more merges than tokens");
    const std::size_t base = tokens.size() - merges.size();
    std::vector<Bytes> head(tokens.begin(), tokens.begin() + static_cast<std::ptrdiff_t>(base));
    TokenVocabulary v(std::move(head), {});
    for (std::size_t i = 0; i < merges.size(); ++i) {
      v.append_merge(merges[i].first, merges[i].second);
      if (v.tokens_.back() != tokens[base + i]) {
        throw Error("vocabulary: token " + std::to_string(base + i) +
                    " does not equal the concatenation of merge " + std::to_string(i));
      }
    }
    return v;
  }

  std::size_t size() const { return tokens_.size(); }
  const Bytes& token(TokenId id) const {
    if (id >= tokens_.size()) {
      throw Error("vocabulary: id " + std::to_string(id) + " out of range (size " +
                  std::to_string(tokens_.size()) + ")");
    }
    return tokens_[id];
  }
  const std::vector<Bytes>& tokens() const { return tokens_; }
  const std::vector<MergeRule>& merges() const { return merges_; }
  TokenId byte_id(unsigned char b) const { return byte_to_id_[b]; }

  /// Rank of the merge joining (left, right), if one exists.
  std::optional<std::uint32_t> merge_rank(TokenId left, TokenId right) const {
    auto it = merge_index_.find(pair_key(left, right));
    if (it == merge_index_.end()) return std::nullopt;
    return it->second;
  }

  std::vector<std::uint32_t> byte_lengths() const {
    std::vector<std::uint32_t> out;
    out.reserve(tokens_.size());
    for (const auto& t : tokens_) out.push_back(static_cast<std::uint32_t>(t.size()));
    return out;
  }

  /// Content hash over tokens and merges; identifies the vocabulary in
  /// corpus and checkpoint headers.
  std::uint64_t hash() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& t : tokens_) {
      const std::uint32_t n = static_cast<std::uint32_t>(t.size());
      h = fnv1a(std::string_view(reinterpret_cast<const char*>(&n), sizeof n), h);
      h = fnv1a(t, h);
    }
    for (const auto& m : merges_) {
      const std::uint32_t lr[2] = {m.left, m.right};
      h = fnv1a(std::string_view(reinterpret_cast<const char*>(lr), sizeof lr), h);
    }
    return h;
  }

  void append_merge(TokenId left, TokenId right) {
    if (left >= tokens_.size() || right >= tokens_.size()) {
      throw Error("vocabulary: merge (" + std::to_string(left) + "," + std::to_string(right) +
                  ") references an unknown id");
    }
    const auto key = pair_key(left, right);
    if (merge_index_.count(key)) {
      throw Error("vocabulary: duplicate merge (" + std::to_string(left) + "," +
                  std::to_string(right) + ")");
    }
    const TokenId id = static_cast<TokenId>(tokens_.size());
    merge_index_.emplace(key, static_cast<std::uint32_t>(merges_.size()));
    merges_.push_back(MergeRule{left, right, id});
    tokens_.push_back(tokens_[left] + tokens_[right]);
  }

  friend bool operator==(const TokenVocabulary& a, const TokenVocabulary& b) {
    if (a.tokens_ != b.tokens_ || a.merges_.size() != b.merges_.size()) return false;
    for (std::size_t i = 0; i < a.merges_.size(); ++i) {
      const auto &x = a.merges_[i], &y = b.merges_[i];
      if (x.left != y.left || x.right != y.right || x.result != y.result) return false;
    }
    return true;
  }

  // File format: one "id<TAB>hex-bytes" line per token, then a "#MERGES"
  // line, then one "left<TAB>right" line per merge in creation order.
  void save(std::ostream& os) const {
    for (std::size_t i = 0; i < tokens_.size(); ++i) os << i << '\t' << to_hex(tokens_[i]) << '\n';
    os << "#MERGES\n";
    for (const auto& m : merges_) os << m.left << '\t' << m.right << '\n';
  }

  static TokenVocabulary load(std::istream& is) {
    std::vector<Bytes> tokens;
    std::vector<std::pair<TokenId, TokenId>> merges;
    std::string line;
    std::size_t lineno = 0;
    bool in_merges = false;
    auto fail = [&](const std::string& why) {
      throw Error("vocabulary file line " + std::to_string(lineno) + ": " + why);
    };
    while (std::getline(is, line)) {
      ++lineno;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty()) continue;
      if (line == "#MERGES") {
        in_merges = true;
        continue;
      }
      const auto tab = line.find('\t');
      if (tab == std::string::npos) fail("expected two tab-separated fields");
      const std::string a = line.substr(0, tab), b = line.substr(tab + 1);
      if (!in_merges) {
        unsigned long id = 0;
        try {
          id = std::stoul(a);
        } catch (...) {
          fail("bad id '" + a + "'");
        }
        if (id != tokens.size()) fail("ids must be dense and ascending");
        auto bytes = from_hex(b);
        if (!bytes || bytes->empty()) fail("bad hex token '" + b + "'");
        tokens.push_back(std::move(*bytes));
      } else {
        try {
          merges.emplace_back(static_cast<TokenId>(std::stoul(a)),
                              static_cast<TokenId>(std::stoul(b)));
        } catch (...) {
          fail("bad merge record");
        }
      }
    }
    return from_tokens(std::move(tokens), std::move(merges));
  }

  void save_file(const std::string& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error("cannot write vocabulary file " + path);
    save(os);
  }
  static TokenVocabulary load_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw Error("cannot read vocabulary file " + path);
    return load(is);
  }

 private:
  TokenVocabulary(std::vector<Bytes> tokens, std::vector<MergeRule> merges)
      : tokens_(std::move(tokens)), merges_(std::move(merges)) {
    std::array<bool, 256> seen{};
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
      if (tokens_[i].size() == 1) {
        const auto b = static_cast<unsigned char>(tokens_[i][0]);
        if (!seen[b]) byte_to_id_[b] = static_cast<TokenId>(i);
        seen[b] = true;
      }
    }
    for (int b = 0; b < 256; ++b) {
      if (!seen[b]) throw Error("vocabulary: single-byte token " + std::to_string(b) + " missing");
    }
  }

  static std::uint64_t pair_key(TokenId l, TokenId r) {
    return (static_cast<std::uint64_t>(l) << 32) | r;
  }

  std::vector<Bytes> tokens_;
  std::vector<MergeRule> merges_;
  std::array<TokenId, 256> byte_to_id_{};
  std::unordered_map<std::uint64_t, std::uint32_t> merge_index_;
};

}  // namespace lmkit
