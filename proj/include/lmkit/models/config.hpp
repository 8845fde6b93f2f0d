// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "lmkit/numerics/tensor.hpp"

namespace lmkit {

enum class Family { kGpt, kLstm, kQlstm };

inline std::string family_name(Family f) {
  switch (f) {
    case Family::kGpt: return "gpt";
    case Family::kLstm: return "lstm";
    case Family::kQlstm: return "qlstm";
  }
  return "?";
}

inline Family parse_family(const std::string& s) {
  if (s == "gpt") return Family::kGpt;
  if (s == "lstm") return Family::kLstm;
  if (s == "qlstm") return Family::kQlstm;
  throw Error("unknown model family '" + s + "' (expected gpt, lstm or qlstm)");
}

/// Architecture hyperparameters. The attention / cell width is
/// n_heads * d_head, which may differ from d_model (the mini rows use 8 heads
/// of 32 on a 512-wide residual stream).
struct ModelConfig {
  std::string name = "custom";
  Family family = Family::kGpt;
  std::size_t d_model = 128;
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t d_head = 32;
  std::size_t vocab_size = 16384;
  std::size_t seq_len = 512;
  std::size_t block_len = 1;  // qlstm only; 1 selects the step-by-step path

  std::size_t width() const { return n_heads * d_head; }
  std::size_t mlp_width() const { return 4 * d_model; }

  void validate() const {
    auto positive = [this](std::size_t v, const char* what) {
      if (v == 0) throw Error("model config '" + name + "': " + what + " must be positive");
    };
    positive(d_model, "d_model");
    positive(n_layers, "n_layers");
    positive(n_heads, "n_heads");
    positive(d_head, "d_head");
    positive(vocab_size, "vocab_size");
    positive(seq_len, "seq_len");
    positive(block_len, "block_len");
    if (d_model < 2) throw Error("model config '" + name + "': d_model must be at least 2");
    if (family == Family::kQlstm && block_len > seq_len) {
      throw Error("model config '" + name + "': block_len " + std::to_string(block_len) +
                  " exceeds seq_len " + std::to_string(seq_len));
    }
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"name", c.name},         {"family", family_name(c.family)},
                     {"d_model", c.d_model},   {"n_layers", c.n_layers},
                     {"n_heads", c.n_heads},   {"d_head", c.d_head},
                     {"vocab_size", c.vocab_size}, {"seq_len", c.seq_len},
                     {"block_len", c.block_len}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  c.name = j.value("name", std::string("custom"));
  c.family = parse_family(j.at("family").get<std::string>());
  j.at("d_model").get_to(c.d_model);
  j.at("n_layers").get_to(c.n_layers);
  j.at("n_heads").get_to(c.n_heads);
  j.at("d_head").get_to(c.d_head);
  j.at("vocab_size").get_to(c.vocab_size);
  j.at("seq_len").get_to(c.seq_len);
  c.block_len = j.value("block_len", std::size_t{1});
  c.validate();
}

namespace presets_detail {

inline ModelConfig make(const std::string& name, Family f, std::size_t d, std::size_t layers,
                        std::size_t heads, std::size_t dh, std::size_t block = 1) {
  ModelConfig c;
  c.name = name;
  c.family = f;
  c.d_model = d;
  c.n_layers = layers;
  c.n_heads = heads;
  c.d_head = dh;
  c.vocab_size = 16384;
  c.seq_len = 512;
  c.block_len = block;
  return c;
}

inline const std::map<std::string, ModelConfig>& table() {
  static const std::map<std::string, ModelConfig> t = [] {
    using F = Family;
    std::map<std::string, ModelConfig> m;
    auto put = [&m](ModelConfig c) { m.emplace(c.name, std::move(c)); };
    put(make("gpt-mini", F::kGpt, 512, 4, 8, 32));
    put(make("gpt-tiny", F::kGpt, 768, 4, 12, 64));
    put(make("gpt-small", F::kGpt, 768, 12, 12, 64));
    put(make("gpt-medium", F::kGpt, 1024, 24, 16, 64));
    put(make("gpt-large", F::kGpt, 1536, 24, 16, 96));
    put(make("gpt-xl", F::kGpt, 2048, 24, 24, 128));
    put(make("qlstm-mini", F::kQlstm, 512, 4, 8, 32, 16));
    put(make("qlstm-tiny", F::kQlstm, 768, 4, 12, 64, 8));
    put(make("qlstm-small", F::kQlstm, 768, 12, 12, 64, 16));
    put(make("qlstm-medium", F::kQlstm, 1024, 24, 16, 64, 16));
    put(make("qlstm-large", F::kQlstm, 1536, 24, 16, 96, 16));
    put(make("qlstm-xl", F::kQlstm, 2048, 24, 24, 128, 16));
    put(make("lstm-small", F::kLstm, 768, 12, 12, 64));
    // Desk presets: small enough to train on one CPU core in minutes.
    for (auto [name, fam] : {std::pair{"gpt-desk", F::kGpt}, std::pair{"qlstm-desk", F::kQlstm},
                             std::pair{"lstm-desk", F::kLstm}}) {
      ModelConfig c = make(name, fam, 128, 2, 4, 32, fam == F::kQlstm ? 16 : 1);
      c.seq_len = 64;
      put(c);
    }
    return m;
  }();
  return t;
}

}  // namespace presets_detail

/// Named configurations: {gpt,qlstm}-{mini,tiny,small,medium,large,xl},
/// lstm-small and the {gpt,qlstm,lstm}-desk presets.
inline ModelConfig preset(const std::string& name) {
  const auto& t = presets_detail::table();
  auto it = t.find(name);
  if (it == t.end()) {
    std::string known;
    for (const auto& [k, v] : t) known += (known.empty() ? "" : ", ") + k;
    throw Error("unknown preset '" + name + "'; known presets: " + known);
  }
  return it->second;
}

inline std::vector<std::string> preset_names() {
  std::vector<std::string> out;
  for (const auto& [k, v] : presets_detail::table()) out.push_back(k);
  return out;
}

/// Exact parameter count implied by the config. Input and output embeddings
/// are untied; GPT carries a learned position table, the recurrent families
/// do not.
inline std::uint64_t count_params(const ModelConfig& c) {
  c.validate();
  const std::uint64_t d = c.d_model, w = c.width(), V = c.vocab_size, m = c.mlp_width();
  const std::uint64_t mlp = d * m + m + m * d + d;
  const std::uint64_t norms = 4 * d;
  std::uint64_t sub = 0;
  switch (c.family) {
    case Family::kGpt:
      sub = 3 * (d * w + w) + w * d + d;
      break;
    case Family::kQlstm:
      sub = 4 * (d * w + w) + w * d + d;
      break;
    case Family::kLstm:
      sub = 4 * (d * w + w + c.n_heads * c.d_head * c.d_head) + w * d + d;
      break;
  }
  std::uint64_t total = V * d + d * V + 2 * d + c.n_layers * (sub + mlp + norms);
  if (c.family == Family::kGpt) total += c.seq_len * d;
  return total;
}

}  // namespace lmkit
