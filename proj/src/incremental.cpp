#include "ngram/incremental.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

namespace ngram {

namespace {

void check_row(std::span<const double> row, std::size_t width, const char* what) {
  if (row.size() != width) {
    throw DimensionError(std::string(what) + " row has " + std::to_string(row.size()) + " values, cache width is " +
                         std::to_string(width));
  }
}

// Single query against w cached rows, all visible.
Tensor attend_heads(const Tensor& q, const Tensor& keys, const Tensor& values, std::size_t heads) {
  const std::size_t d = q.cols();
  const std::size_t dk = d / heads;
  const MaskMatrix visible = MaskMatrix::all(1, keys.rows());
  Tensor context = Tensor::zeros(1, d);
  for (std::size_t h = 0; h < heads; ++h) {
    Tensor out = scaled_dot_attention(column_block(q, h * dk, dk), column_block(keys, h * dk, dk),
                                      column_block(values, h * dk, dk), visible);
    set_column_block(context, h * dk, out);
  }
  return context;
}

Tensor ffn_row(const Tensor& x, const FeedForwardParams& p) {
  Tensor hidden = matmul(x, p.w1);
  add_row_bias(hidden, p.b1);
  for (double& v : hidden.data()) v = v > 0.0 ? v : 0.0;
  Tensor out = matmul(hidden, p.w2);
  add_row_bias(out, p.b2);
  return out;
}

using Clock = std::chrono::steady_clock;

double elapsed_ns(Clock::time_point since) {
  return std::chrono::duration<double, std::nano>(Clock::now() - since).count();
}

}  // namespace

RingBufferCache::RingBufferCache(std::size_t capacity, std::size_t width)
    : capacity_(capacity), width_(width), keys_(capacity * width, 0.0), values_(capacity * width, 0.0) {
  if (capacity == 0) throw std::invalid_argument("RingBufferCache: capacity must be at least 1");
  if (width == 0) throw std::invalid_argument("RingBufferCache: width must be at least 1");
}

void RingBufferCache::push(std::size_t position, std::span<const double> key, std::span<const double> value) {
  if (position != last_position_ + 1) {
    throw ProtocolError("cache push out of order: expected position " + std::to_string(last_position_ + 1) +
                        ", got " + std::to_string(position));
  }
  check_row(key, width_, "key");
  check_row(value, width_, "value");
  const std::size_t slot = (position - 1) % capacity_;
  std::copy(key.begin(), key.end(), keys_.begin() + static_cast<std::ptrdiff_t>(slot * width_));
  std::copy(value.begin(), value.end(), values_.begin() + static_cast<std::ptrdiff_t>(slot * width_));
  last_position_ = position;
  count_ = std::min(count_ + 1, capacity_);
  next_slot_ = position % capacity_;
}

CacheWindow RingBufferCache::window() const {
  if (count_ == 0) throw ProtocolError("cache window requested before any push");
  CacheWindow w{Tensor::zeros(count_, width_), Tensor::zeros(count_, width_), {}};
  w.positions.reserve(count_);
  // Oldest retained entry sits at next_slot once the buffer has wrapped.
  const std::size_t first_position = last_position_ - count_ + 1;
  for (std::size_t i = 0; i < count_; ++i) {
    const std::size_t position = first_position + i;
    const std::size_t slot = (position - 1) % capacity_;
    const auto offset = static_cast<std::ptrdiff_t>(slot * width_);
    std::copy_n(keys_.begin() + offset, width_, w.keys.row(i).begin());
    std::copy_n(values_.begin() + offset, width_, w.values.row(i).begin());
    w.positions.push_back(position);
  }
  return w;
}

void AppendOnlyCache::push(std::size_t position, std::span<const double> key, std::span<const double> value) {
  if (position != count_ + 1) {
    throw ProtocolError("cache push out of order: expected position " + std::to_string(count_ + 1) + ", got " +
                        std::to_string(position));
  }
  check_row(key, width_, "key");
  check_row(value, width_, "value");
  keys_.insert(keys_.end(), key.begin(), key.end());
  values_.insert(values_.end(), value.begin(), value.end());
  ++count_;
}

CacheWindow AppendOnlyCache::window() const {
  if (count_ == 0) throw ProtocolError("cache window requested before any push");
  CacheWindow w{Tensor({count_, width_}, keys_), Tensor({count_, width_}, values_), {}};
  w.positions.resize(count_);
  for (std::size_t i = 0; i < count_; ++i) w.positions[i] = i + 1;
  return w;
}

KvCache make_cache(const MaskSpec& mask, std::size_t width) {
  mask.validate();
  if (mask.kind == MaskKind::ngram) return RingBufferCache(static_cast<std::size_t>(mask.order - 1), width);
  return AppendOnlyCache(width);
}

std::size_t cache_count(const KvCache& cache) {
  return std::visit([](const auto& c) { return c.count(); }, cache);
}

std::size_t DecodeState::cached_positions() const {
  std::size_t n = 0;
  for (const auto& c : caches) n = std::max(n, cache_count(c));
  return n;
}

DecodeState start_decode(const Tensor& memory, const ModelParams& params, const ModelConfig& config) {
  config.validate();
  DecodeState state;
  state.memory = memory;
  const auto d = static_cast<std::size_t>(config.d_model);
  for (const auto& layer : params.decoder) {
    state.cross_keys.push_back(matmul(memory, layer.cross_attn.wk));
    state.cross_values.push_back(matmul(memory, layer.cross_attn.wv));
    state.caches.push_back(make_cache(config.mask, d));
  }
  return state;
}

DecodeState start_decode(const TokenSequence& source, const ModelParams& params, const ModelConfig& config) {
  return start_decode(encode(source, params, config), params, config);
}

Tensor incremental_step(DecodeState& state, int token, const ModelParams& params, const ModelConfig& config,
                        StepStats* stats) {
  const auto step_start = Clock::now();
  if (token < 0 || token >= config.vocab_size) {
    throw InputError("token id " + std::to_string(token) + " is outside the vocabulary [0, " +
                     std::to_string(config.vocab_size) + ")");
  }
  if (state.position > static_cast<std::size_t>(config.max_positions)) {
    throw InputError("decode position " + std::to_string(state.position) + " exceeds max_positions " +
                     std::to_string(config.max_positions));
  }
  const auto d = static_cast<std::size_t>(config.d_model);
  const double scale = std::sqrt(static_cast<double>(d));

  Tensor x = Tensor::zeros(1, d);
  sinusoidal_position_row(state.position - 1, x.row(0));
  {
    auto e = params.embedding.row(static_cast<std::size_t>(token));
    auto row = x.row(0);
    for (std::size_t j = 0; j < d; ++j) row[j] += scale * e[j];
  }

  double attention_ns = 0.0;
  for (std::size_t l = 0; l < params.decoder.size(); ++l) {
    const auto& layer = params.decoder[l];
    const std::size_t heads = layer.self_attn.heads;

    Tensor q = matmul(x, layer.self_attn.wq);
    Tensor k = matmul(x, layer.self_attn.wk);
    Tensor v = matmul(x, layer.self_attn.wv);

    const auto attn_start = Clock::now();
    CacheWindow window = std::visit(
        [&](auto& cache) {
          cache.push(state.position, k.row(0), v.row(0));
          return cache.window();
        },
        state.caches[l]);
    Tensor context = attend_heads(q, window.keys, window.values, heads);
    attention_ns += elapsed_ns(attn_start);
    if (stats != nullptr && l == 0) {
      stats->attended_keys = window.positions.size();
      stats->cache_entries = cache_count(state.caches[l]);
    }

    Tensor a = matmul(context, layer.self_attn.wo);
    Tensor y1 = layer_norm(add(x, a), layer.norm1.gain, layer.norm1.bias, config.layer_norm_eps);
    Tensor qc = matmul(y1, layer.cross_attn.wq);
    Tensor c = matmul(attend_heads(qc, state.cross_keys[l], state.cross_values[l], layer.cross_attn.heads),
                      layer.cross_attn.wo);
    Tensor y2 = layer_norm(add(y1, c), layer.norm2.gain, layer.norm2.bias, config.layer_norm_eps);
    x = layer_norm(add(y2, ffn_row(y2, layer.ffn)), layer.norm3.gain, layer.norm3.bias, config.layer_norm_eps);
  }
  Tensor logits = matmul(x, params.output_proj);

  state.emitted.push_back(token);
  ++state.position;
  if (stats != nullptr) {
    stats->self_attention_ns = attention_ns;
    stats->total_ns = elapsed_ns(step_start);
  }
  return Tensor({logits.cols()}, std::vector<double>(logits.data().begin(), logits.data().end()));
}

int argmax(std::span<const double> logits) {
  if (logits.empty()) throw std::invalid_argument("argmax of empty logits");
  std::size_t best = 0;
  for (std::size_t i = 1; i < logits.size(); ++i) {
    if (logits[i] > logits[best]) best = i;
  }
  return static_cast<int>(best);
}

TokenSequence greedy_decode(const TokenSequence& source, const ModelParams& params, const ModelConfig& config,
                            std::size_t max_len) {
  if (max_len < 1) throw InputError("greedy_decode: max_len must be at least 1");
  DecodeState state = start_decode(source, params, config);
  std::vector<int> out{kBos};
  while (out.size() < max_len && state.position <= static_cast<std::size_t>(config.max_positions)) {
    Tensor logits = incremental_step(state, out.back(), params, config);
    const int next = argmax(logits.data());
    out.push_back(next);
    if (next == kEos) break;
  }
  return TokenSequence::target(std::move(out));
}

}  // namespace ngram
