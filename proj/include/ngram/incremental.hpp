#pragma once

#include <cstddef>
#include <span>
#include <stdexcept>
#include <variant>
#include <vector>

#include "ngram/model.hpp"

namespace ngram {

/// Out-of-order pushes, reads from an empty cache.
class ProtocolError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Keys and values visible to the current query, oldest position first.
struct CacheWindow {
  Tensor keys;    // w × width
  Tensor values;  // w × width
  std::vector<std::size_t> positions;  // 1-indexed, ascending
};

/// Fixed-capacity key/value store for one decoder layer. Position p lands in
/// slot (p - 1) mod capacity, so after positions 1..p have been written the
/// buffer holds exactly max(1, p - capacity + 1)..p. Keys and values are kept
/// in the projected, pre-head-split layout (one d_model-wide row per position).
class RingBufferCache {
 public:
  RingBufferCache(std::size_t capacity, std::size_t width);

  /// Positions must arrive as 1, 2, 3, ...
  void push(std::size_t position, std::span<const double> key, std::span<const double> value);
  CacheWindow window() const;

  std::size_t capacity() const { return capacity_; }
  std::size_t width() const { return width_; }
  std::size_t count() const { return count_; }
  std::size_t next_slot() const { return next_slot_; }
  std::size_t last_position() const { return last_position_; }
  /// Doubles held for keys plus values; fixed at construction.
  std::size_t allocated_numbers() const { return keys_.size() + values_.size(); }

 private:
  std::size_t capacity_;
  std::size_t width_;
  std::size_t count_ = 0;
  std::size_t next_slot_ = 0;
  std::size_t last_position_ = 0;
  std::vector<double> keys_;
  std::vector<double> values_;
};

/// Unbounded cache for full causal decoding.
class AppendOnlyCache {
 public:
  explicit AppendOnlyCache(std::size_t width) : width_(width) {}

  void push(std::size_t position, std::span<const double> key, std::span<const double> value);
  CacheWindow window() const;

  std::size_t width() const { return width_; }
  std::size_t count() const { return count_; }
  std::size_t last_position() const { return count_; }
  std::size_t allocated_numbers() const { return keys_.size() + values_.size(); }

 private:
  std::size_t width_;
  std::size_t count_ = 0;
  std::vector<double> keys_;
  std::vector<double> values_;
};

using KvCache = std::variant<RingBufferCache, AppendOnlyCache>;

/// ngram masks get a ring buffer of capacity N-1, causal masks an append-only cache.
KvCache make_cache(const MaskSpec& mask, std::size_t width);
std::size_t cache_count(const KvCache& cache);

struct DecodeState {
  Tensor memory;                     // encoder output, S × d_model
  std::vector<Tensor> cross_keys;    // per decoder layer, memory · W_k
  std::vector<Tensor> cross_values;  // per decoder layer, memory · W_v
  std::vector<KvCache> caches;       // per decoder layer
  std::size_t position = 1;          // 1-indexed position of the next fed token
  std::vector<int> emitted;          // tokens fed so far

  /// Largest number of cached positions in any layer.
  std::size_t cached_positions() const;
};

DecodeState start_decode(const Tensor& memory, const ModelParams& params, const ModelConfig& config);
DecodeState start_decode(const TokenSequence& source, const ModelParams& params, const ModelConfig& config);

struct StepStats {
  double self_attention_ns = 0.0;   // push + window read + attention, summed over layers
  double total_ns = 0.0;
  std::size_t attended_keys = 0;    // keys seen by the first layer's query
  std::size_t cache_entries = 0;    // positions held by the first layer's cache after the push
};

/// Feeds `token` at state.position and returns the V logits for the next
/// token. When `stats` is set the step is timed.
Tensor incremental_step(DecodeState& state, int token, const ModelParams& params, const ModelConfig& config,
                        StepStats* stats = nullptr);

/// Index of the largest logit, lowest index on ties.
int argmax(std::span<const double> logits);

TokenSequence greedy_decode(const TokenSequence& source, const ModelParams& params, const ModelConfig& config,
                            std::size_t max_len);

}  // namespace ngram
