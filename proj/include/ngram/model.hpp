#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "ngram/attention.hpp"
#include "ngram/tensor.hpp"

namespace ngram {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Bad token ids, over-long sequences, empty targets.
class InputError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline constexpr int kPad = 0;
inline constexpr int kBos = 1;
inline constexpr int kEos = 2;
inline constexpr int kFirstContentToken = 3;

struct ModelConfig {
  int num_layers = 2;
  int num_heads = 2;
  int d_model = 32;
  int d_ff = 64;
  int vocab_size = 64;
  /// Decoder self-attention visibility; causal or ngram.
  MaskSpec mask = MaskSpec::causal();
  double dropout_rate = 0.0;
  double layer_norm_eps = 1e-6;
  int max_positions = 64;

  void validate() const;
  /// Ordered key/value rendering used by checkpoints.
  std::vector<std::pair<std::string, std::string>> to_key_values() const;
  static ModelConfig from_key_values(const std::map<std::string, std::string>& kv);

  bool operator==(const ModelConfig&) const = default;
};

enum class SequenceRole { source, target };

struct TokenSequence {
  std::vector<int> ids;
  SequenceRole role = SequenceRole::target;

  std::size_t size() const { return ids.size(); }
  static TokenSequence source(std::vector<int> ids) { return {std::move(ids), SequenceRole::source}; }
  static TokenSequence target(std::vector<int> ids) { return {std::move(ids), SequenceRole::target}; }

  bool operator==(const TokenSequence&) const = default;
};

/// Throws InputError if any id is outside [0, vocab) or the sequence is empty.
void check_ids(const TokenSequence& seq, int vocab_size);

struct LayerNormParams {
  Tensor gain;
  Tensor bias;
};

struct FeedForwardParams {
  Tensor w1;  // d_model × d_ff
  Tensor b1;  // d_ff
  Tensor w2;  // d_ff × d_model
  Tensor b2;  // d_model
};

struct EncoderLayerParams {
  MhaWeights self_attn;
  LayerNormParams norm1;
  FeedForwardParams ffn;
  LayerNormParams norm2;
};

struct DecoderLayerParams {
  MhaWeights self_attn;
  LayerNormParams norm1;
  MhaWeights cross_attn;
  LayerNormParams norm2;
  FeedForwardParams ffn;
  LayerNormParams norm3;
};

/// All trainable tensors. Gradients use the same type.
struct ModelParams {
  Tensor embedding;  // V × d_model, shared by source and target
  std::vector<EncoderLayerParams> encoder;
  std::vector<DecoderLayerParams> decoder;
  Tensor output_proj;  // d_model × V

  /// Visits every tensor in a fixed order with a stable dotted name.
  void for_each(const std::function<void(const std::string&, Tensor&)>& fn);
  void for_each(const std::function<void(const std::string&, const Tensor&)>& fn) const;

  std::size_t parameter_count() const;
  ModelParams zeros_like() const;

  bool operator==(const ModelParams& other) const;
};

/// Xavier-initialized weights, unit layer-norm gains, zero biases, and a zero
/// output projection (so the initial predictive distribution is uniform).
ModelParams init_params(const ModelConfig& config, std::uint64_t seed);

/// Checks every tensor shape against the config.
void check_params(const ModelParams& params, const ModelConfig& config);

/// Interleaved sine/cosine table: even column 2i holds sin(p / 10000^(2i/d)),
/// odd column 2i+1 the matching cosine, for 0-indexed position p.
Tensor sinusoidal_positions(std::size_t length, std::size_t d_model);
void sinusoidal_position_row(std::size_t position, std::span<double> out);

/// Token embeddings scaled by sqrt(d_model) plus positions.
Tensor embed(const std::vector<int>& ids, const ModelParams& params, const ModelConfig& config);

Tensor encode(const TokenSequence& source, const ModelParams& params, const ModelConfig& config);

/// Decoder stack on already-embedded inputs (T × d_model); returns T × V logits.
Tensor decode_embedded(const Tensor& inputs, const Tensor& memory, const ModelParams& params,
                       const ModelConfig& config);

/// logits row k (0-indexed) scores the token that follows prefix position k.
Tensor decode_full(const TokenSequence& target_prefix, const Tensor& memory, const ModelParams& params,
                   const ModelConfig& config);

struct LossResult {
  double loss = 0.0;            // mean NLL over predicted tokens
  double total_nll = 0.0;
  std::size_t predicted = 0;    // number of scored positions
  Tensor logits;                // T × V
};

/// Teacher-forced cross-entropy of target[1..] given target[..T-1]. PAD
/// targets are not scored. When `dropout_rng` is set and dropout_rate > 0,
/// dropout is applied to every sublayer output.
LossResult model_forward_loss(const TokenSequence& source, const TokenSequence& target,
                              const ModelParams& params, const ModelConfig& config,
                              SeededRng* dropout_rng = nullptr);

struct LossAndGrad {
  double loss = 0.0;
  std::size_t predicted = 0;
  ModelParams grads;
};

LossAndGrad model_backward(const TokenSequence& source, const TokenSequence& target, const ModelParams& params,
                           const ModelConfig& config, SeededRng* dropout_rng = nullptr);

// Checkpoints: "NGRAMCKPT 1\n", config lines "key = value\n", "end\n", then
// u64 tensor count and for each tensor u64 name length, name bytes and the
// tensor in the numeric-core layout.
inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  ModelConfig config;
  ModelParams params;
};

void write_checkpoint(std::ostream& out, const ModelConfig& config, const ModelParams& params);
Checkpoint read_checkpoint(std::istream& in);
void save_checkpoint(const std::filesystem::path& path, const ModelConfig& config, const ModelParams& params);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace ngram
