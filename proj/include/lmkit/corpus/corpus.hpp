// SPDX-License-Identifier: Apache-2.0
#pragma once

// Tokenised corpora: ingestion with document filters, train/test splits and
// the binary corpus file.

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "lmkit/numerics/tensor.hpp"
#include "lmkit/tokenizer/bpe.hpp"
#include "lmkit/tokenizer/vocabulary.hpp"

namespace lmkit {

/// A contiguous token stream made of documents, each followed by the
/// separator id. The separator is one past the last vocabulary id, so a
/// model over this corpus needs id_limit = vocab.size() + 1 output classes.
class TokenCorpus {
 public:
  TokenCorpus() = default;
  TokenCorpus(std::vector<TokenId> tokens, std::vector<std::uint64_t> doc_offsets,
              std::uint64_t vocab_hash, std::size_t id_limit, std::string split)
      : tokens_(std::move(tokens)),
        offsets_(std::move(doc_offsets)),
        vocab_hash_(vocab_hash),
        id_limit_(id_limit),
        split_(std::move(split)) {
    validate();
  }

  /// Concatenates already-tokenised documents with separators.
  static TokenCorpus from_documents(const std::vector<std::vector<TokenId>>& docs,
                                    std::uint64_t vocab_hash, std::size_t id_limit,
                                    std::string split) {
    std::vector<TokenId> tokens;
    std::vector<std::uint64_t> offsets;
    std::size_t total = 0;
    for (const auto& d : docs) total += d.size() + 1;
    tokens.reserve(total);
    for (const auto& d : docs) {
      offsets.push_back(tokens.size());
      tokens.insert(tokens.end(), d.begin(), d.end());
      tokens.push_back(static_cast<TokenId>(id_limit - 1));
    }
    return TokenCorpus(std::move(tokens), std::move(offsets), vocab_hash, id_limit,
                       std::move(split));
  }

  std::span<const TokenId> tokens() const { return tokens_; }
  const std::vector<std::uint64_t>& doc_offsets() const { return offsets_; }
  std::uint64_t vocab_hash() const { return vocab_hash_; }
  std::size_t id_limit() const { return id_limit_; }
  TokenId separator() const { return static_cast<TokenId>(id_limit_ - 1); }
  const std::string& split() const { return split_; }
  void set_split(std::string s) { split_ = std::move(s); }
  std::size_t size() const { return tokens_.size(); }
  std::size_t num_documents() const { return offsets_.size(); }

  /// Tokens of document i including its trailing separator.
  std::span<const TokenId> document(std::size_t i) const {
    if (i >= offsets_.size()) {
      throw Error("corpus: document " + std::to_string(i) + " out of range (" +
                  std::to_string(offsets_.size()) + " documents)");
    }
    const std::size_t end = i + 1 < offsets_.size() ? offsets_[i + 1] : tokens_.size();
    return std::span<const TokenId>(tokens_).subspan(offsets_[i], end - offsets_[i]);
  }

  void validate() const {
    if (id_limit_ == 0) throw Error("corpus: id limit must be positive");
    for (std::size_t i = 0; i < offsets_.size(); ++i) {
      if (offsets_[i] >= tokens_.size() || (i > 0 && offsets_[i] <= offsets_[i - 1])) {
        throw Error("corpus: document offset " + std::to_string(i) +
                    " is not strictly increasing within the stream");
      }
    }
    if (!tokens_.empty() && (offsets_.empty() || offsets_[0] != 0))
      throw Error("corpus: first document must start at offset 0");
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
      if (tokens_[i] >= id_limit_) {
        throw Error("corpus: token " + std::to_string(tokens_[i]) + " at position " +
                    std::to_string(i) + " is not below the id limit " + std::to_string(id_limit_));
      }
    }
  }

  /// Byte length per id for decoding-based counts; the separator decodes to
  /// nothing.
  static std::vector<std::uint32_t> byte_lengths(const TokenVocabulary& vocab) {
    auto lens = vocab.byte_lengths();
    lens.push_back(0);
    return lens;
  }

 private:
  std::vector<TokenId> tokens_;
  std::vector<std::uint64_t> offsets_;
  std::uint64_t vocab_hash_ = 0;
  std::size_t id_limit_ = 0;
  std::string split_;
};

// ------------------------------------------------------------------ ingestion

struct SourceDocument {
  std::string name;
  Bytes text;
};

struct Exclusion {
  std::size_t index = 0;
  std::string name;
  std::string reason;  // "too short" or "low bytes per token"
  std::size_t bytes = 0;
  double bytes_per_token = 0.0;
};

struct IngestResult {
  TokenCorpus corpus;
  std::vector<Exclusion> excluded;
};

/// Tokenises every document and drops those under min_bytes or with fewer
/// than min_bpt decoded bytes per token.
inline IngestResult ingest(std::span<const SourceDocument> docs, const TokenVocabulary& vocab,
                           std::size_t min_bytes, double min_bpt, std::string split = "train") {
  IngestResult out;
  std::vector<std::vector<TokenId>> kept;
  for (std::size_t i = 0; i < docs.size(); ++i) {
    const auto& d = docs[i];
    Exclusion ex{i, d.name, "", d.text.size(), 0.0};
    if (d.text.empty() || d.text.size() < min_bytes) {
      ex.reason = "too short";
      out.excluded.push_back(std::move(ex));
      continue;
    }
    auto ids = encode(d.text, vocab);
    ex.bytes_per_token = static_cast<double>(d.text.size()) / static_cast<double>(ids.size());
    if (ex.bytes_per_token < min_bpt) {
      ex.reason = "low bytes per token";
      out.excluded.push_back(std::move(ex));
      continue;
    }
    kept.push_back(std::move(ids));
  }
  if (kept.empty()) {
    std::size_t short_n = 0;
    for (const auto& e : out.excluded) short_n += e.reason == "too short";
    throw Error("ingest: all " + std::to_string(docs.size()) + " documents were filtered (" +
                std::to_string(short_n) + " too short, " +
                std::to_string(out.excluded.size() - short_n) + " low bytes per token)");
  }
  out.corpus = TokenCorpus::from_documents(kept, vocab.hash(), vocab.size() + 1, std::move(split));
  return out;
}

inline IngestResult ingest(const std::vector<Bytes>& texts, const TokenVocabulary& vocab,
                           std::size_t min_bytes, double min_bpt, std::string split = "train") {
  std::vector<SourceDocument> docs;
  docs.reserve(texts.size());
  for (std::size_t i = 0; i < texts.size(); ++i) docs.push_back({"doc" + std::to_string(i), texts[i]});
  return ingest(std::span<const SourceDocument>(docs), vocab, min_bytes, min_bpt, std::move(split));
}

inline Bytes read_file_bytes(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw Error("cannot read " + p.string());
  return Bytes(std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>());
}

/// One document per regular file, ordered by file name.
inline std::vector<SourceDocument> read_text_dir(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw Error("not a directory: " + dir.string());
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.is_regular_file()) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::vector<SourceDocument> docs;
  for (const auto& f : files) docs.push_back({f.filename().string(), read_file_bytes(f)});
  if (docs.empty()) throw Error("no files in " + dir.string());
  return docs;
}

// --------------------------------------------------------------------- splits

/// Unbiased Fisher-Yates over mt19937_64, spelled out so the permutation is
/// the same on every standard library.
template <typename It>
void fisher_yates(It first, It last, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const auto n = static_cast<std::uint64_t>(last - first);
  for (std::uint64_t i = n; i > 1; --i) {
    // rejection sampling for a uniform draw in [0, i)
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % i;
    std::uint64_t r;
    do r = rng(); while (r >= limit);
    std::swap(first[i - 1], first[r % i]);
  }
}

struct CorpusSplits {
  TokenCorpus train;
  TokenCorpus test;
  std::vector<std::size_t> test_documents;  // indices into the source corpus, ascending
};

/// Samples test_docs documents into the test split; the rest stay in train
/// in their original order.
inline CorpusSplits make_splits(const TokenCorpus& corpus, std::size_t test_docs,
                                std::uint64_t seed) {
  const std::size_t n = corpus.num_documents();
  if (test_docs == 0 || test_docs >= n) {
    throw Error("make_splits: need more than " + std::to_string(test_docs) +
                " documents and at least one test document, corpus has " + std::to_string(n));
  }
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  fisher_yates(order.begin(), order.end(), seed);
  std::vector<bool> is_test(n, false);
  for (std::size_t i = 0; i < test_docs; ++i) is_test[order[i]] = true;
  std::vector<std::vector<TokenId>> tr, te;
  CorpusSplits out;
  for (std::size_t i = 0; i < n; ++i) {
    auto d = corpus.document(i);
    std::vector<TokenId> body(d.begin(), d.end() - 1);  // separator is re-added
    if (is_test[i]) {
      te.push_back(std::move(body));
      out.test_documents.push_back(i);
    } else {
      tr.push_back(std::move(body));
    }
  }
  out.train = TokenCorpus::from_documents(tr, corpus.vocab_hash(), corpus.id_limit(), "train");
  out.test = TokenCorpus::from_documents(te, corpus.vocab_hash(), corpus.id_limit(), "test");
  return out;
}

// ---------------------------------------------------------------- binary file
//
// Layout (little-endian):
//   "LMKC" u32 version u64 vocab_hash u64 id_limit u8 width(2|4)
//   u32 split_len split u64 n_tokens ids[n_tokens]
//   footer: u64 n_docs u64 offsets[n_docs] "CKML"

namespace corpus_detail {

inline constexpr char kMagic[4] = {'L', 'M', 'K', 'C'};
inline constexpr char kFooter[4] = {'C', 'K', 'M', 'L'};
inline constexpr std::uint32_t kVersion = 1;

template <typename U>
void put(std::ostream& os, U v) {
  static_assert(std::endian::native == std::endian::little, "big-endian hosts unsupported");
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename U>
U get(std::istream& is, const std::string& path) {
  U v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof v)) throw Error("corpus file " + path + ": truncated");
  return v;
}

}  // namespace corpus_detail

inline std::uint8_t token_width(std::size_t id_limit) { return id_limit <= 65536 ? 2 : 4; }

inline void write_corpus(const std::string& path, const TokenCorpus& c) {
  using namespace corpus_detail;
  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw Error("corpus: cannot write " + tmp);
    os.write(kMagic, 4);
    put<std::uint32_t>(os, kVersion);
    put<std::uint64_t>(os, c.vocab_hash());
    put<std::uint64_t>(os, c.id_limit());
    const std::uint8_t width = token_width(c.id_limit());
    put<std::uint8_t>(os, width);
    put<std::uint32_t>(os, static_cast<std::uint32_t>(c.split().size()));
    os.write(c.split().data(), static_cast<std::streamsize>(c.split().size()));
    put<std::uint64_t>(os, c.size());
    if (width == 2) {
      std::vector<std::uint16_t> buf(c.tokens().begin(), c.tokens().end());
      os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * 2));
    } else {
      os.write(reinterpret_cast<const char*>(c.tokens().data()),
               static_cast<std::streamsize>(c.size() * 4));
    }
    put<std::uint64_t>(os, c.num_documents());
    for (auto off : c.doc_offsets()) put<std::uint64_t>(os, off);
    os.write(kFooter, 4);
    if (!os) throw Error("corpus: write to " + tmp + " failed");
  }
  std::filesystem::rename(tmp, path);
}

inline TokenCorpus read_corpus(const std::string& path) {
  using namespace corpus_detail;
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("corpus: cannot read " + path);
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0)
    throw Error("corpus file " + path + ": bad magic bytes");
  const auto version = get<std::uint32_t>(is, path);
  if (version != kVersion) {
    throw Error("corpus file " + path + ": format version " + std::to_string(version) +
                " not supported (expected " + std::to_string(kVersion) + ")");
  }
  const auto hash = get<std::uint64_t>(is, path);
  const auto id_limit = get<std::uint64_t>(is, path);
  const auto width = get<std::uint8_t>(is, path);
  if (width != token_width(id_limit)) {
    throw Error("corpus file " + path + ": token width " + std::to_string(width) +
                " does not match id limit " + std::to_string(id_limit));
  }
  std::string split(get<std::uint32_t>(is, path), '\0');
  if (!is.read(split.data(), static_cast<std::streamsize>(split.size())))
    throw Error("corpus file " + path + ": truncated");
  const auto n = get<std::uint64_t>(is, path);
  std::vector<TokenId> tokens(n);
  if (width == 2) {
    std::vector<std::uint16_t> buf(n);
    is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(n * 2));
    std::copy(buf.begin(), buf.end(), tokens.begin());
  } else {
    is.read(reinterpret_cast<char*>(tokens.data()), static_cast<std::streamsize>(n * 4));
  }
  if (!is) throw Error("corpus file " + path + ": truncated token payload");
  std::vector<std::uint64_t> offsets(get<std::uint64_t>(is, path));
  for (auto& o : offsets) o = get<std::uint64_t>(is, path);
  char footer[4];
  if (!is.read(footer, 4) || std::memcmp(footer, kFooter, 4) != 0)
    throw Error("corpus file " + path + ": missing footer");
  return TokenCorpus(std::move(tokens), std::move(offsets), hash, id_limit, std::move(split));
}

}  // namespace lmkit
