#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "ngram/tensor.hpp"

namespace ngram {

class InvalidOrderError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A query row with no visible key reached the attention kernel.
class ContractViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

enum class MaskKind { full, causal, ngram };

std::string to_string(MaskKind kind);
MaskKind parse_mask_kind(const std::string& text);

/// Declarative attention visibility. For ngram, `order` is N: a query sees
/// itself and the N-2 positions before it.
struct MaskSpec {
  MaskKind kind = MaskKind::causal;
  int order = 0;

  static MaskSpec full() { return {MaskKind::full, 0}; }
  static MaskSpec causal() { return {MaskKind::causal, 0}; }
  static MaskSpec ngram(int n) { return {MaskKind::ngram, n}; }

  void validate() const;
  /// Number of keys a query at 1-indexed position k may see.
  std::size_t visible_keys(std::size_t k) const;
  std::string describe() const;

  bool operator==(const MaskSpec&) const = default;
};

/// Realized visibility grid. Stored 0-indexed; row i is query position i+1.
class MaskMatrix {
 public:
  MaskMatrix() = default;
  MaskMatrix(std::size_t queries, std::size_t keys, bool value);

  /// Everything visible, for cross attention or the encoder.
  static MaskMatrix all(std::size_t queries, std::size_t keys) { return MaskMatrix(queries, keys, true); }

  std::size_t queries() const { return queries_; }
  std::size_t keys() const { return keys_; }
  std::size_t size() const { return queries_; }

  bool allowed(std::size_t q, std::size_t k) const { return cells_[q * keys_ + k] != 0; }
  void set(std::size_t q, std::size_t k, bool value) { cells_[q * keys_ + k] = value ? 1 : 0; }
  std::size_t row_count(std::size_t q) const;

  /// One line per query: 'x' for visible, '.' for masked.
  std::string render() const;

  bool operator==(const MaskMatrix&) const = default;

 private:
  std::size_t queries_ = 0;
  std::size_t keys_ = 0;
  std::vector<unsigned char> cells_;
};

MaskMatrix build_mask(const MaskSpec& spec, std::size_t length);

struct AttentionResult {
  Tensor output;   // T_q × d_v
  Tensor weights;  // T_q × T_k, exact zeros on masked cells
};

AttentionResult scaled_dot_attention_with_weights(const Tensor& q, const Tensor& k, const Tensor& v,
                                                  const MaskMatrix& mask);

Tensor scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v, const MaskMatrix& mask);

struct AttentionGrads {
  Tensor d_q;
  Tensor d_k;
  Tensor d_v;
};

AttentionGrads scaled_dot_attention_backward(const Tensor& q, const Tensor& k, const Tensor& v,
                                             const Tensor& weights, const Tensor& d_out);

/// Projections for H heads packed column-wise: head h owns columns
/// [h*d_k, (h+1)*d_k) of wq, wk, wv and rows [h*d_k, (h+1)*d_k) of wo.
struct MhaWeights {
  Tensor wq;  // d_model × d_model
  Tensor wk;
  Tensor wv;
  Tensor wo;
  std::size_t heads = 1;

  std::size_t model_width() const { return wq.rows(); }
  std::size_t head_width() const { return model_width() / heads; }

  static MhaWeights zeros(std::size_t d_model, std::size_t heads);
  static MhaWeights xavier(SeededRng& rng, std::size_t d_model, std::size_t heads);
  void validate() const;
};

/// Intermediate values kept by the forward pass for the backward pass.
struct MhaTrace {
  Tensor q;  // T_q × d_model, projected
  Tensor k;  // T_k × d_model
  Tensor v;
  Tensor context;                // concatenated head outputs, T_q × d_model
  std::vector<Tensor> weights;   // per head, T_q × T_k
};

Tensor multi_head_attention(const Tensor& x_q, const Tensor& x_kv, const MhaWeights& w,
                            const MaskMatrix& mask, MhaTrace* trace = nullptr);

struct MhaGrads {
  Tensor d_x_q;
  Tensor d_x_kv;
  MhaWeights d_w;
};

MhaGrads multi_head_attention_backward(const Tensor& x_q, const Tensor& x_kv, const MhaWeights& w,
                                       const MhaTrace& trace, const Tensor& d_out);

/// Copies columns [begin, begin + width) of x.
Tensor column_block(const Tensor& x, std::size_t begin, std::size_t width);
void set_column_block(Tensor& x, std::size_t begin, const Tensor& block);
void add_column_block(Tensor& x, std::size_t begin, const Tensor& block);

}  // namespace ngram
