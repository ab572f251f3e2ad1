#include "ngram/attention.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace ngram {

std::string to_string(MaskKind kind) {
  switch (kind) {
    case MaskKind::full: return "full";
    case MaskKind::causal: return "causal";
    case MaskKind::ngram: return "ngram";
  }
  return "unknown";
}

MaskKind parse_mask_kind(const std::string& text) {
  if (text == "full") return MaskKind::full;
  if (text == "causal") return MaskKind::causal;
  if (text == "ngram") return MaskKind::ngram;
  throw std::invalid_argument("unknown mask kind '" + text + "' (expected full, causal or ngram)");
}

void MaskSpec::validate() const {
  if (kind == MaskKind::ngram && order < 2) {
    throw InvalidOrderError("ngram mask requires order >= 2, got " + std::to_string(order));
  }
}

std::size_t MaskSpec::visible_keys(std::size_t k) const {
  if (kind == MaskKind::ngram) return std::min(k, static_cast<std::size_t>(order - 1));
  return k;
}

std::string MaskSpec::describe() const {
  if (kind == MaskKind::ngram) return "ngram(" + std::to_string(order) + ")";
  return to_string(kind);
}

MaskMatrix::MaskMatrix(std::size_t queries, std::size_t keys, bool value)
    : queries_(queries), keys_(keys), cells_(queries * keys, value ? 1 : 0) {}

std::size_t MaskMatrix::row_count(std::size_t q) const {
  std::size_t n = 0;
  for (std::size_t k = 0; k < keys_; ++k) n += cells_[q * keys_ + k];
  return n;
}

std::string MaskMatrix::render() const {
  std::string out;
  out.reserve(queries_ * (keys_ + 1));
  for (std::size_t q = 0; q < queries_; ++q) {
    for (std::size_t k = 0; k < keys_; ++k) out.push_back(allowed(q, k) ? 'x' : '.');
    out.push_back('\n');
  }
  return out;
}

MaskMatrix build_mask(const MaskSpec& spec, std::size_t length) {
  spec.validate();
  if (length == 0) throw std::invalid_argument("build_mask: length must be at least 1");
  if (spec.kind == MaskKind::full) return MaskMatrix::all(length, length);

  MaskMatrix mask(length, length, false);
  // 0-indexed: query i sees keys [i - w + 1, i], w = visible window.
  const std::size_t window = spec.kind == MaskKind::ngram ? static_cast<std::size_t>(spec.order - 1) : length;
  for (std::size_t i = 0; i < length; ++i) {
    const std::size_t first = i + 1 >= window ? i + 1 - window : 0;
    for (std::size_t j = first; j <= i; ++j) mask.set(i, j, true);
  }
  return mask;
}

AttentionResult scaled_dot_attention_with_weights(const Tensor& q, const Tensor& k, const Tensor& v,
                                                  const MaskMatrix& mask) {
  if (q.cols() != k.cols() || k.rows() != v.rows()) {
    throw DimensionError("scaled_dot_attention: Q " + shape_to_string(q.shape()) + ", K " +
                         shape_to_string(k.shape()) + ", V " + shape_to_string(v.shape()));
  }
  if (mask.queries() != q.rows() || mask.keys() != k.rows()) {
    throw DimensionError("scaled_dot_attention: mask is " + std::to_string(mask.queries()) + "x" +
                         std::to_string(mask.keys()) + " but attention is " + std::to_string(q.rows()) +
                         "x" + std::to_string(k.rows()));
  }
  const double scale = 1.0 / std::sqrt(static_cast<double>(q.cols()));
  Tensor logits = matmul_bt(q, k);
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    bool any = false;
    for (std::size_t j = 0; j < logits.cols(); ++j) {
      if (mask.allowed(i, j)) {
        logits(i, j) *= scale;
        any = true;
      } else {
        logits(i, j) = kMaskedLogit;
      }
    }
    if (!any) {
      throw ContractViolation("scaled_dot_attention: query row " + std::to_string(i + 1) + " has no visible key");
    }
  }
  Tensor weights = softmax_rows(logits);
  Tensor output = matmul(weights, v);
  return {std::move(output), std::move(weights)};
}

Tensor scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v, const MaskMatrix& mask) {
  return scaled_dot_attention_with_weights(q, k, v, mask).output;
}

AttentionGrads scaled_dot_attention_backward(const Tensor& q, const Tensor& k, const Tensor& v,
                                             const Tensor& weights, const Tensor& d_out) {
  if (d_out.rows() != q.rows() || d_out.cols() != v.cols() || weights.rows() != q.rows() ||
      weights.cols() != k.rows()) {
    throw DimensionError("scaled_dot_attention_backward: upstream " + shape_to_string(d_out.shape()) +
                         " does not match forward shapes");
  }
  const double scale = 1.0 / std::sqrt(static_cast<double>(q.cols()));
  AttentionGrads g;
  g.d_v = matmul_at(weights, d_out);
  Tensor d_weights = matmul_bt(d_out, v);
  // Softmax Jacobian; masked cells have zero weight and so zero gradient.
  Tensor d_logits(weights.shape());
  for (std::size_t i = 0; i < weights.rows(); ++i) {
    double dot = 0.0;
    for (std::size_t j = 0; j < weights.cols(); ++j) dot += weights(i, j) * d_weights(i, j);
    for (std::size_t j = 0; j < weights.cols(); ++j) {
      d_logits(i, j) = weights(i, j) * (d_weights(i, j) - dot) * scale;
    }
  }
  g.d_q = matmul(d_logits, k);
  g.d_k = matmul_at(d_logits, q);
  return g;
}

MhaWeights MhaWeights::zeros(std::size_t d_model, std::size_t heads) {
  MhaWeights w{Tensor::zeros(d_model, d_model), Tensor::zeros(d_model, d_model),
               Tensor::zeros(d_model, d_model), Tensor::zeros(d_model, d_model), heads};
  w.validate();
  return w;
}

MhaWeights MhaWeights::xavier(SeededRng& rng, std::size_t d_model, std::size_t heads) {
  MhaWeights w;
  w.wq = xavier_init(rng, d_model, d_model);
  w.wk = xavier_init(rng, d_model, d_model);
  w.wv = xavier_init(rng, d_model, d_model);
  w.wo = xavier_init(rng, d_model, d_model);
  w.heads = heads;
  w.validate();
  return w;
}

void MhaWeights::validate() const {
  const std::size_t d = wq.rows();
  if (heads == 0 || d % heads != 0) {
    throw DimensionError("attention: " + std::to_string(heads) + " heads do not divide width " + std::to_string(d));
  }
  for (const Tensor* t : {&wq, &wk, &wv, &wo}) {
    if (t->rank() != 2 || t->rows() != d || t->cols() != d) {
      throw DimensionError("attention: projection shape " + shape_to_string(t->shape()) +
                           " is not " + std::to_string(d) + "x" + std::to_string(d));
    }
  }
}

Tensor column_block(const Tensor& x, std::size_t begin, std::size_t width) {
  Tensor out = Tensor::zeros(x.rows(), width);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto src = x.row(r).subspan(begin, width);
    std::copy(src.begin(), src.end(), out.row(r).begin());
  }
  return out;
}

void set_column_block(Tensor& x, std::size_t begin, const Tensor& block) {
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto src = block.row(r);
    std::copy(src.begin(), src.end(), x.row(r).begin() + static_cast<std::ptrdiff_t>(begin));
  }
}

void add_column_block(Tensor& x, std::size_t begin, const Tensor& block) {
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto src = block.row(r);
    auto dst = x.row(r).subspan(begin, src.size());
    for (std::size_t j = 0; j < src.size(); ++j) dst[j] += src[j];
  }
}

Tensor multi_head_attention(const Tensor& x_q, const Tensor& x_kv, const MhaWeights& w,
                            const MaskMatrix& mask, MhaTrace* trace) {
  const std::size_t d = w.model_width();
  if (x_q.cols() != d || x_kv.cols() != d) {
    throw DimensionError("multi_head_attention: inputs " + shape_to_string(x_q.shape()) + " and " +
                         shape_to_string(x_kv.shape()) + " do not match model width " + std::to_string(d));
  }
  const std::size_t dk = w.head_width();
  Tensor q = matmul(x_q, w.wq);
  Tensor k = matmul(x_kv, w.wk);
  Tensor v = matmul(x_kv, w.wv);
  Tensor context = Tensor::zeros(x_q.rows(), d);
  std::vector<Tensor> weights;
  for (std::size_t h = 0; h < w.heads; ++h) {
    auto head = scaled_dot_attention_with_weights(column_block(q, h * dk, dk), column_block(k, h * dk, dk),
                                                  column_block(v, h * dk, dk), mask);
    set_column_block(context, h * dk, head.output);
    if (trace != nullptr) weights.push_back(std::move(head.weights));
  }
  Tensor out = matmul(context, w.wo);
  if (trace != nullptr) {
    trace->q = std::move(q);
    trace->k = std::move(k);
    trace->v = std::move(v);
    trace->context = std::move(context);
    trace->weights = std::move(weights);
  }
  return out;
}

MhaGrads multi_head_attention_backward(const Tensor& x_q, const Tensor& x_kv, const MhaWeights& w,
                                       const MhaTrace& trace, const Tensor& d_out) {
  const std::size_t d = w.model_width();
  const std::size_t dk = w.head_width();
  if (d_out.rows() != x_q.rows() || d_out.cols() != d) {
    throw DimensionError("multi_head_attention_backward: upstream " + shape_to_string(d_out.shape()) +
                         " does not match output " + std::to_string(x_q.rows()) + "x" + std::to_string(d));
  }
  MhaGrads g;
  g.d_w = MhaWeights::zeros(d, w.heads);
  accumulate_matmul_at(g.d_w.wo, trace.context, d_out);
  Tensor d_context = matmul_bt(d_out, w.wo);

  Tensor d_q = Tensor::zeros(x_q.rows(), d);
  Tensor d_k = Tensor::zeros(x_kv.rows(), d);
  Tensor d_v = Tensor::zeros(x_kv.rows(), d);
  for (std::size_t h = 0; h < w.heads; ++h) {
    auto hg = scaled_dot_attention_backward(column_block(trace.q, h * dk, dk), column_block(trace.k, h * dk, dk),
                                            column_block(trace.v, h * dk, dk), trace.weights[h],
                                            column_block(d_context, h * dk, dk));
    set_column_block(d_q, h * dk, hg.d_q);
    set_column_block(d_k, h * dk, hg.d_k);
    set_column_block(d_v, h * dk, hg.d_v);
  }
  accumulate_matmul_at(g.d_w.wq, x_q, d_q);
  accumulate_matmul_at(g.d_w.wk, x_kv, d_k);
  accumulate_matmul_at(g.d_w.wv, x_kv, d_v);
  g.d_x_q = matmul_bt(d_q, w.wq);
  g.d_x_kv = matmul_bt(d_k, w.wk);
  add_inplace(g.d_x_kv, matmul_bt(d_v, w.wv));
  return g;
}

}  // namespace ngram
