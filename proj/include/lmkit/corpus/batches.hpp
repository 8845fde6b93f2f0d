// SPDX-License-Identifier: Apache-2.0
#pragma once

// Batch iteration over a token stream: contiguous lanes for training,
// sliding padded windows for evaluation, and a one-slot-ahead prefetcher.

#include <condition_variable>
#include <cstdint>
#include <deque>
#include <functional>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "lmkit/corpus/corpus.hpp"

namespace lmkit {

struct BatchPlan {
  std::size_t batch = 1;
  std::size_t seq_len = 512;
  std::size_t stride = 512;
  std::size_t accumulation = 1;

  void validate() const {
    if (batch == 0 || seq_len == 0 || accumulation == 0)
      throw Error("batch plan: batch, seq_len and accumulation must be positive");
    if (stride == 0 || stride > seq_len) {
      throw Error("batch plan: stride " + std::to_string(stride) + " must lie in (0, seq_len " +
                  std::to_string(seq_len) + "]");
    }
  }

  /// batch x sequence length x accumulation steps
  std::uint64_t tokens_per_step() const {
    return static_cast<std::uint64_t>(batch) * seq_len * accumulation;
  }

  friend bool operator==(const BatchPlan&, const BatchPlan&) = default;
};

inline void to_json(nlohmann::json& j, const BatchPlan& p) {
  j = nlohmann::json{{"batch", p.batch}, {"seq_len", p.seq_len}, {"stride", p.stride},
                     {"accumulation", p.accumulation}};
}

inline void from_json(const nlohmann::json& j, BatchPlan& p) {
  j.at("batch").get_to(p.batch);
  j.at("seq_len").get_to(p.seq_len);
  p.stride = j.value("stride", p.seq_len);
  p.accumulation = j.value("accumulation", std::size_t{1});
  p.validate();
}

enum class BatchMode { kTrain, kEval };

/// inputs/targets/mask are [batch x seq] row-major. Padded positions carry
/// id 0 and mask 0. starts[r] is the stream position of row r's first input
/// (meaningless for fully padded rows, which have valid[r] == false).
struct Batch {
  std::size_t index = 0;
  std::size_t batch = 0;
  std::size_t seq = 0;
  std::vector<TokenId> inputs;
  std::vector<TokenId> targets;
  std::vector<std::uint8_t> mask;
  std::vector<std::size_t> starts;
  std::vector<bool> valid;

  std::size_t scored() const {
    std::size_t n = 0;
    for (auto m : mask) n += m;
    return n;
  }
};

/// Random-access view of the batches a plan yields over a corpus.
///
/// Train: b contiguous lanes of n_batches * s tokens each tile a prefix of
/// the stream; batch k row j reads stream[j*n*s + k*s, +s] with targets one
/// position ahead. Trailing tokens that do not fill a batch are dropped.
///
/// Eval: one window per stride step, starting at 0, stride, 2*stride, ...
/// while the window still has a target. Windows that run past the stream end
/// are padded and masked; the last batch is filled with fully padded rows.
class BatchSequence {
 public:
  BatchSequence(std::span<const TokenId> stream, BatchPlan plan, BatchMode mode)
      : stream_(stream), plan_(plan), mode_(mode) {
    plan_.validate();
    const std::size_t n = stream_.size(), s = plan_.seq_len, b = plan_.batch;
    if (n <= s) {
      throw Error("batches: stream of " + std::to_string(n) + " tokens is not longer than seq_len " +
                  std::to_string(s));
    }
    if (mode_ == BatchMode::kTrain) {
      plan_.stride = s;
      per_lane_ = (n - 1) / (b * s);
      if (per_lane_ == 0) {
        throw Error("batches: " + std::to_string(n) + " tokens cannot fill " + std::to_string(b) +
                    " lanes of " + std::to_string(s) + " tokens");
      }
      count_ = per_lane_;
    } else {
      windows_ = (n - 1 + plan_.stride - 1) / plan_.stride;
      count_ = (windows_ + b - 1) / b;
    }
  }

  std::size_t size() const { return count_; }
  std::size_t windows() const { return mode_ == BatchMode::kTrain ? count_ * plan_.batch : windows_; }
  const BatchPlan& plan() const { return plan_; }
  BatchMode mode() const { return mode_; }

  Batch at(std::size_t k) const {
    if (k >= count_) throw Error("batches: index " + std::to_string(k) + " out of range");
    const std::size_t s = plan_.seq_len, b = plan_.batch, n = stream_.size();
    Batch out;
    out.index = k;
    out.batch = b;
    out.seq = s;
    out.inputs.assign(b * s, 0);
    out.targets.assign(b * s, 0);
    out.mask.assign(b * s, 0);
    out.starts.assign(b, 0);
    out.valid.assign(b, false);
    for (std::size_t r = 0; r < b; ++r) {
      std::size_t start;
      if (mode_ == BatchMode::kTrain) {
        start = r * per_lane_ * s + k * s;
      } else {
        const std::size_t w = k * b + r;
        if (w >= windows_) continue;
        start = w * plan_.stride;
      }
      out.starts[r] = start;
      out.valid[r] = true;
      for (std::size_t t = 0; t < s && start + t + 1 < n; ++t) {
        out.inputs[r * s + t] = stream_[start + t];
        out.targets[r * s + t] = stream_[start + t + 1];
        out.mask[r * s + t] = 1;
      }
    }
    return out;
  }

  class Iterator {
   public:
    Iterator(const BatchSequence* seq, std::size_t k) : seq_(seq), k_(k) {}
    Batch operator*() const { return seq_->at(k_); }
    Iterator& operator++() { ++k_; return *this; }
    bool operator!=(const Iterator& o) const { return k_ != o.k_; }

   private:
    const BatchSequence* seq_;
    std::size_t k_;
  };
  Iterator begin() const { return Iterator(this, 0); }
  Iterator end() const { return Iterator(this, count_); }

 private:
  std::span<const TokenId> stream_;
  BatchPlan plan_;
  BatchMode mode_;
  std::size_t per_lane_ = 0;
  std::size_t windows_ = 0;
  std::size_t count_ = 0;
};

inline BatchSequence iterate_batches(const TokenCorpus& corpus, const BatchPlan& plan, BatchMode mode) {
  return BatchSequence(corpus.tokens(), plan, mode);
}

/// Runs `produce` on a worker thread up to `depth` items ahead of the
/// consumer. Items arrive in production order; an empty optional ends the
/// stream. Exceptions from the producer are rethrown by next().
template <typename Item>
class Prefetcher {
 public:
  Prefetcher(std::function<std::optional<Item>()> produce, std::size_t depth = 2)
      : produce_(std::move(produce)), depth_(depth == 0 ? 1 : depth) {
    worker_ = std::jthread([this](std::stop_token st) { run(st); });
  }
  ~Prefetcher() {
    {
      std::lock_guard lock(mu_);
      worker_.request_stop();
    }
    cv_.notify_all();
  }
  Prefetcher(const Prefetcher&) = delete;
  Prefetcher& operator=(const Prefetcher&) = delete;

  std::optional<Item> next() {
    std::unique_lock lock(mu_);
    cv_.wait(lock, [this] { return !queue_.empty() || done_; });
    if (queue_.empty()) {
      if (error_) std::rethrow_exception(error_);
      return std::nullopt;
    }
    Item item = std::move(queue_.front());
    queue_.pop_front();
    cv_.notify_all();
    return item;
  }

 private:
  void run(std::stop_token st) {
    try {
      while (!st.stop_requested()) {
        auto item = produce_();
        std::unique_lock lock(mu_);
        if (!item) break;
        cv_.wait(lock, [&] { return queue_.size() < depth_ || st.stop_requested(); });
        if (st.stop_requested()) break;
        queue_.push_back(std::move(*item));
        cv_.notify_all();
      }
    } catch (...) {
      std::lock_guard lock(mu_);
      error_ = std::current_exception();
    }
    std::lock_guard lock(mu_);
    done_ = true;
    cv_.notify_all();
  }

  std::function<std::optional<Item>()> produce_;
  std::size_t depth_;
  std::mutex mu_;
  std::condition_variable cv_;
  std::deque<Item> queue_;
  bool done_ = false;
  std::exception_ptr error_;
  std::jthread worker_;  // last member: joins before the rest is destroyed
};

}  // namespace lmkit
