// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "lmkit/models/config.hpp"
#include "lmkit/numerics/tensor.hpp"

namespace lmkit {

/// Named parameter tensors in a fixed, config-determined order.
template <typename T>
class ModelParams {
 public:
  ModelParams() = default;

  /// Shapes dictated by the config, zero-filled (LayerNorm gains included).
  static ModelParams zeros(const ModelConfig& c) {
    c.validate();
    ModelParams p;
    const std::size_t d = c.d_model, w = c.width(), V = c.vocab_size, m = c.mlp_width();
    p.add("tok_emb", {V, d});
    if (c.family == Family::kGpt) p.add("pos_emb", {c.seq_len, d});
    for (std::size_t l = 0; l < c.n_layers; ++l) {
      const std::string pre = "l" + std::to_string(l) + ".";
      p.add(pre + "ln1.g", {d});
      p.add(pre + "ln1.b", {d});
      if (c.family == Family::kGpt) {
        for (const char* n : {"q", "k", "v"}) {
          p.add(pre + "attn.w" + n, {d, w});
          p.add(pre + "attn.b" + n, {w});
        }
        p.add(pre + "attn.wo", {w, d});
        p.add(pre + "attn.bo", {d});
      } else {
        for (const char* n : {"f", "i", "z", "o"}) {
          p.add(pre + "cell.w" + n, {d, w});
          p.add(pre + "cell.b" + n, {w});
          if (c.family == Family::kLstm) p.add(pre + "cell.u" + n, {c.n_heads, c.d_head, c.d_head});
        }
        p.add(pre + "cell.wh", {w, d});
        p.add(pre + "cell.bh", {d});
      }
      p.add(pre + "ln2.g", {d});
      p.add(pre + "ln2.b", {d});
      p.add(pre + "mlp.w1", {d, m});
      p.add(pre + "mlp.b1", {m});
      p.add(pre + "mlp.w2", {m, d});
      p.add(pre + "mlp.b2", {d});
    }
    p.add("ln_f.g", {d});
    p.add("ln_f.b", {d});
    p.add("head", {d, V});
    return p;
  }

  /// normal(0, 0.02) for matrices and embeddings, zero biases, unit
  /// LayerNorm gains, forget-gate bias +1.
  static ModelParams init(const ModelConfig& c, std::uint64_t seed) {
    ModelParams p = zeros(c);
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 0.02);
    for (std::size_t i = 0; i < p.size(); ++i) {
      const std::string& n = p.names_[i];
      Tensor<T>& t = p.tensors_[i];
      if (n.ends_with(".g")) {
        t.fill(T{1});
      } else if (n.ends_with("cell.bf")) {
        t.fill(T{1});
      } else if (t.rank() >= 2) {
        for (auto& v : t.values()) v = static_cast<T>(normal(rng));
      }
    }
    return p;
  }

  std::size_t size() const { return tensors_.size(); }
  const std::vector<std::string>& names() const { return names_; }
  std::vector<Tensor<T>>& tensors() { return tensors_; }
  const std::vector<Tensor<T>>& tensors() const { return tensors_; }

  bool contains(const std::string& name) const { return index_.count(name) > 0; }
  std::size_t index(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw Error("model params: no tensor named '" + name + "'");
    return it->second;
  }
  Tensor<T>& operator[](const std::string& name) { return tensors_[index(name)]; }
  const Tensor<T>& operator[](const std::string& name) const { return tensors_[index(name)]; }

  std::uint64_t count() const {
    std::uint64_t n = 0;
    for (const auto& t : tensors_) n += t.size();
    return n;
  }

  template <typename U>
  ModelParams<U> cast() const {
    ModelParams<U> out;
    for (std::size_t i = 0; i < size(); ++i) out.add(names_[i], tensors_[i].template cast<U>());
    return out;
  }

  void add(const std::string& name, Shape shape) { add(name, Tensor<T>(std::move(shape))); }
  void add(const std::string& name, Tensor<T> t) {
    if (index_.count(name)) throw Error("model params: duplicate tensor '" + name + "'");
    index_.emplace(name, tensors_.size());
    names_.push_back(name);
    tensors_.push_back(std::move(t));
  }

  /// Shapes and names must equal those implied by `c`.
  void check_against(const ModelConfig& c) const {
    const ModelParams expect = zeros(c);
    if (expect.size() != size()) {
      throw Error("model params: " + std::to_string(size()) + " tensors, config '" + c.name +
                  "' implies " + std::to_string(expect.size()));
    }
    for (std::size_t i = 0; i < size(); ++i) {
      if (names_[i] != expect.names_[i] || tensors_[i].shape() != expect.tensors_[i].shape()) {
        throw Error("model params: tensor " + std::to_string(i) + " is '" + names_[i] + "' " +
                    shape_str(tensors_[i].shape()) + ", config expects '" + expect.names_[i] +
                    "' " + shape_str(expect.tensors_[i].shape()));
      }
    }
  }

 private:
  std::vector<std::string> names_;
  std::vector<Tensor<T>> tensors_;
  std::unordered_map<std::string, std::size_t> index_;
};

// ---------------------------------------------------------------- checkpoints
//
// Layout (all integers little-endian):
//   "LMKM" u32 version u64 vocab_hash u32 json_len json(config)
//   u32 n_tensors, then per tensor:
//     u32 name_len name u32 rank u64 dims[rank] u8 width(4|8) payload

namespace ckpt_detail {

inline constexpr char kMagic[4] = {'L', 'M', 'K', 'M'};
inline constexpr std::uint32_t kVersion = 1;

template <typename U>
void put(std::ostream& os, U v) {
  static_assert(std::endian::native == std::endian::little, "big-endian hosts unsupported");
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename U>
U get(std::istream& is, const std::string& path) {
  U v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof v)) throw Error("checkpoint " + path + ": truncated");
  return v;
}

}  // namespace ckpt_detail

template <typename T>
struct Checkpoint {
  ModelConfig config;
  std::uint64_t vocab_hash = 0;
  ModelParams<T> params;
  nlohmann::json extra;  // optimiser step and other run metadata
};

/// Writes to a temporary sibling, then renames, so readers never observe a
/// partial file.
template <typename T>
void save_checkpoint(const std::string& path, const ModelConfig& config, std::uint64_t vocab_hash,
                     const ModelParams<T>& params, const nlohmann::json& extra = nlohmann::json::object()) {
  using namespace ckpt_detail;
  params.check_against(config);
  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw Error("checkpoint: cannot write " + tmp);
    os.write(kMagic, 4);
    put<std::uint32_t>(os, kVersion);
    put<std::uint64_t>(os, vocab_hash);
    nlohmann::json header = config;
    header["extra"] = extra;
    const std::string js = header.dump();
    put<std::uint32_t>(os, static_cast<std::uint32_t>(js.size()));
    os.write(js.data(), static_cast<std::streamsize>(js.size()));
    put<std::uint32_t>(os, static_cast<std::uint32_t>(params.size()));
    for (std::size_t i = 0; i < params.size(); ++i) {
      const auto& name = params.names()[i];
      const auto& t = params.tensors()[i];
      put<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
      os.write(name.data(), static_cast<std::streamsize>(name.size()));
      put<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
      for (auto dim : t.shape()) put<std::uint64_t>(os, dim);
      put<std::uint8_t>(os, sizeof(T));
      os.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(T)));
    }
    if (!os) throw Error("checkpoint: write to " + tmp + " failed");
  }
  std::filesystem::rename(tmp, path);
}

/// Loads a checkpoint into precision T, converting if it was stored in the
/// other width.
template <typename T>
Checkpoint<T> load_checkpoint(const std::string& path) {
  using namespace ckpt_detail;
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("checkpoint: cannot read " + path);
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0)
    throw Error("checkpoint " + path + ": bad magic bytes");
  const auto version = get<std::uint32_t>(is, path);
  if (version != kVersion) {
    throw Error("checkpoint " + path + ": format version " + std::to_string(version) +
                " not supported (expected " + std::to_string(kVersion) + ")");
  }
  Checkpoint<T> ck;
  ck.vocab_hash = get<std::uint64_t>(is, path);
  std::string js(get<std::uint32_t>(is, path), '\0');
  if (!is.read(js.data(), static_cast<std::streamsize>(js.size())))
    throw Error("checkpoint " + path + ": truncated header");
  const auto header = nlohmann::json::parse(js);
  ck.config = header.get<ModelConfig>();
  ck.extra = header.value("extra", nlohmann::json::object());
  const auto n = get<std::uint32_t>(is, path);
  for (std::uint32_t i = 0; i < n; ++i) {
    std::string name(get<std::uint32_t>(is, path), '\0');
    is.read(name.data(), static_cast<std::streamsize>(name.size()));
    Shape shape(get<std::uint32_t>(is, path));
    for (auto& dim : shape) dim = get<std::uint64_t>(is, path);
    const auto width = get<std::uint8_t>(is, path);
    Tensor<T> t(shape);
    if (width == 4) {
      std::vector<float> buf(t.size());
      is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * 4));
      std::copy(buf.begin(), buf.end(), t.values().begin());
    } else if (width == 8) {
      std::vector<double> buf(t.size());
      is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * 8));
      std::transform(buf.begin(), buf.end(), t.values().begin(), [](double v) { return static_cast<T>(v); });
    } else {
      throw Error("checkpoint " + path + ": tensor '" + name + "' has element width " +
                  std::to_string(width));
    }
    if (!is) throw Error("checkpoint " + path + ": truncated payload in '" + name + "'");
    ck.params.add(name, std::move(t));
  }
  ck.params.check_against(ck.config);
  return ck;
}

}  // namespace lmkit
