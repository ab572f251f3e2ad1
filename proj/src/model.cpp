#include "ngram/model.hpp"

#include <charconv>
#include <cmath>
#include <type_traits>

namespace ngram {

namespace {

std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

int parse_int(const std::map<std::string, std::string>& kv, const std::string& key, int fallback) {
  auto it = kv.find(key);
  if (it == kv.end()) return fallback;
  int value = 0;
  const auto& s = it->second;
  auto res = std::from_chars(s.data(), s.data() + s.size(), value);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw ConfigError("config key '" + key + "': expected an integer, got '" + s + "'");
  }
  return value;
}

double parse_double(const std::map<std::string, std::string>& kv, const std::string& key, double fallback) {
  auto it = kv.find(key);
  if (it == kv.end()) return fallback;
  double value = 0.0;
  const auto& s = it->second;
  auto res = std::from_chars(s.data(), s.data() + s.size(), value);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw ConfigError("config key '" + key + "': expected a number, got '" + s + "'");
  }
  return value;
}

template <class Params, class Fn>
void visit_params(Params& p, Fn&& fn) {
  auto mha = [&](const std::string& prefix, auto& w) {
    fn(prefix + ".wq", w.wq);
    fn(prefix + ".wk", w.wk);
    fn(prefix + ".wv", w.wv);
    fn(prefix + ".wo", w.wo);
  };
  auto norm = [&](const std::string& prefix, auto& n) {
    fn(prefix + ".gain", n.gain);
    fn(prefix + ".bias", n.bias);
  };
  auto ffn = [&](const std::string& prefix, auto& f) {
    fn(prefix + ".w1", f.w1);
    fn(prefix + ".b1", f.b1);
    fn(prefix + ".w2", f.w2);
    fn(prefix + ".b2", f.b2);
  };
  fn(std::string("embedding"), p.embedding);
  for (std::size_t i = 0; i < p.encoder.size(); ++i) {
    const std::string base = "encoder." + std::to_string(i);
    auto& layer = p.encoder[i];
    mha(base + ".self_attn", layer.self_attn);
    norm(base + ".norm1", layer.norm1);
    ffn(base + ".ffn", layer.ffn);
    norm(base + ".norm2", layer.norm2);
  }
  for (std::size_t i = 0; i < p.decoder.size(); ++i) {
    const std::string base = "decoder." + std::to_string(i);
    auto& layer = p.decoder[i];
    mha(base + ".self_attn", layer.self_attn);
    norm(base + ".norm1", layer.norm1);
    mha(base + ".cross_attn", layer.cross_attn);
    norm(base + ".norm2", layer.norm2);
    ffn(base + ".ffn", layer.ffn);
    norm(base + ".norm3", layer.norm3);
  }
  fn(std::string("output_proj"), p.output_proj);
}

LayerNormParams unit_norm(std::size_t d) {
  LayerNormParams n{Tensor::vector(d), Tensor::vector(d)};
  n.gain.fill(1.0);
  return n;
}

FeedForwardParams init_ffn(SeededRng& rng, std::size_t d, std::size_t d_ff) {
  return {xavier_init(rng, d, d_ff), Tensor::vector(d_ff), xavier_init(rng, d_ff, d), Tensor::vector(d)};
}

// ---------------------------------------------------------------------------
// Forward/backward building blocks.

struct Dropout {
  Tensor mask;  // 0 or 1/(1-p); empty when inactive
  bool active() const { return !mask.empty(); }
};

void apply_dropout(Tensor& x, double rate, SeededRng* rng, Dropout* record) {
  if (rng == nullptr || rate <= 0.0) return;
  Tensor mask(x.shape());
  const double keep = 1.0 / (1.0 - rate);
  for (std::size_t i = 0; i < x.size(); ++i) {
    mask[i] = rng->uniform() < rate ? 0.0 : keep;
    x[i] *= mask[i];
  }
  if (record != nullptr) record->mask = std::move(mask);
}

void dropout_backward(Tensor& grad, const Dropout& d) {
  if (!d.active()) return;
  for (std::size_t i = 0; i < grad.size(); ++i) grad[i] *= d.mask[i];
}

struct FfnTrace {
  Tensor hidden_pre;
  Tensor hidden;
};

Tensor ffn_forward(const Tensor& x, const FeedForwardParams& p, FfnTrace* trace) {
  Tensor pre = matmul(x, p.w1);
  add_row_bias(pre, p.b1);
  Tensor hidden = pre;
  for (double& v : hidden.data()) v = v > 0.0 ? v : 0.0;
  Tensor out = matmul(hidden, p.w2);
  add_row_bias(out, p.b2);
  if (trace != nullptr) {
    trace->hidden_pre = std::move(pre);
    trace->hidden = std::move(hidden);
  }
  return out;
}

Tensor ffn_backward(const Tensor& x, const FeedForwardParams& p, const FfnTrace& trace, const Tensor& d_out,
                    FeedForwardParams& g) {
  accumulate_matmul_at(g.w2, trace.hidden, d_out);
  accumulate_column_sums(g.b2, d_out);
  Tensor d_hidden = matmul_bt(d_out, p.w2);
  for (std::size_t i = 0; i < d_hidden.size(); ++i) {
    if (trace.hidden_pre[i] <= 0.0) d_hidden[i] = 0.0;
  }
  accumulate_matmul_at(g.w1, x, d_hidden);
  accumulate_column_sums(g.b1, d_hidden);
  return matmul_bt(d_hidden, p.w1);
}

void add_mha_grads(MhaWeights& dst, const MhaWeights& src) {
  add_inplace(dst.wq, src.wq);
  add_inplace(dst.wk, src.wk);
  add_inplace(dst.wv, src.wv);
  add_inplace(dst.wo, src.wo);
}

struct EncoderLayerTrace {
  Tensor input;
  MhaTrace attn;
  Dropout drop_attn;
  LayerNormCache ln1;
  Tensor y1;
  FfnTrace ffn;
  Dropout drop_ffn;
  LayerNormCache ln2;
};

Tensor encoder_layer_forward(const Tensor& x, const EncoderLayerParams& p, const ModelConfig& cfg,
                             const MaskMatrix& mask, SeededRng* rng, EncoderLayerTrace* tr) {
  Tensor a = multi_head_attention(x, x, p.self_attn, mask, tr ? &tr->attn : nullptr);
  apply_dropout(a, cfg.dropout_rate, rng, tr ? &tr->drop_attn : nullptr);
  Tensor y1 = layer_norm(add(x, a), p.norm1.gain, p.norm1.bias, cfg.layer_norm_eps, tr ? &tr->ln1 : nullptr);
  Tensor f = ffn_forward(y1, p.ffn, tr ? &tr->ffn : nullptr);
  apply_dropout(f, cfg.dropout_rate, rng, tr ? &tr->drop_ffn : nullptr);
  Tensor out = layer_norm(add(y1, f), p.norm2.gain, p.norm2.bias, cfg.layer_norm_eps, tr ? &tr->ln2 : nullptr);
  if (tr != nullptr) {
    tr->input = x;
    tr->y1 = std::move(y1);
  }
  return out;
}

Tensor encoder_layer_backward(const EncoderLayerParams& p, const EncoderLayerTrace& tr, const Tensor& d_out,
                              EncoderLayerParams& g) {
  Tensor d_s2 = layer_norm_backward(d_out, p.norm2.gain, tr.ln2, g.norm2.gain, g.norm2.bias);
  Tensor d_f = d_s2;
  dropout_backward(d_f, tr.drop_ffn);
  Tensor d_y1 = add(d_s2, ffn_backward(tr.y1, p.ffn, tr.ffn, d_f, g.ffn));
  Tensor d_s1 = layer_norm_backward(d_y1, p.norm1.gain, tr.ln1, g.norm1.gain, g.norm1.bias);
  Tensor d_a = d_s1;
  dropout_backward(d_a, tr.drop_attn);
  MhaGrads mg = multi_head_attention_backward(tr.input, tr.input, p.self_attn, tr.attn, d_a);
  add_mha_grads(g.self_attn, mg.d_w);
  add_inplace(d_s1, mg.d_x_q);
  add_inplace(d_s1, mg.d_x_kv);
  return d_s1;
}

struct DecoderLayerTrace {
  Tensor input;
  MhaTrace self_attn;
  Dropout drop_self;
  LayerNormCache ln1;
  Tensor y1;
  MhaTrace cross_attn;
  Dropout drop_cross;
  LayerNormCache ln2;
  Tensor y2;
  FfnTrace ffn;
  Dropout drop_ffn;
  LayerNormCache ln3;
};

Tensor decoder_layer_forward(const Tensor& x, const Tensor& memory, const DecoderLayerParams& p,
                             const ModelConfig& cfg, const MaskMatrix& self_mask, const MaskMatrix& cross_mask,
                             SeededRng* rng, DecoderLayerTrace* tr) {
  Tensor a = multi_head_attention(x, x, p.self_attn, self_mask, tr ? &tr->self_attn : nullptr);
  apply_dropout(a, cfg.dropout_rate, rng, tr ? &tr->drop_self : nullptr);
  Tensor y1 = layer_norm(add(x, a), p.norm1.gain, p.norm1.bias, cfg.layer_norm_eps, tr ? &tr->ln1 : nullptr);
  Tensor c = multi_head_attention(y1, memory, p.cross_attn, cross_mask, tr ? &tr->cross_attn : nullptr);
  apply_dropout(c, cfg.dropout_rate, rng, tr ? &tr->drop_cross : nullptr);
  Tensor y2 = layer_norm(add(y1, c), p.norm2.gain, p.norm2.bias, cfg.layer_norm_eps, tr ? &tr->ln2 : nullptr);
  Tensor f = ffn_forward(y2, p.ffn, tr ? &tr->ffn : nullptr);
  apply_dropout(f, cfg.dropout_rate, rng, tr ? &tr->drop_ffn : nullptr);
  Tensor out = layer_norm(add(y2, f), p.norm3.gain, p.norm3.bias, cfg.layer_norm_eps, tr ? &tr->ln3 : nullptr);
  if (tr != nullptr) {
    tr->input = x;
    tr->y1 = std::move(y1);
    tr->y2 = std::move(y2);
  }
  return out;
}

Tensor decoder_layer_backward(const DecoderLayerParams& p, const DecoderLayerTrace& tr, const Tensor& memory,
                              const Tensor& d_out, DecoderLayerParams& g, Tensor& d_memory) {
  Tensor d_s3 = layer_norm_backward(d_out, p.norm3.gain, tr.ln3, g.norm3.gain, g.norm3.bias);
  Tensor d_f = d_s3;
  dropout_backward(d_f, tr.drop_ffn);
  Tensor d_y2 = add(d_s3, ffn_backward(tr.y2, p.ffn, tr.ffn, d_f, g.ffn));

  Tensor d_s2 = layer_norm_backward(d_y2, p.norm2.gain, tr.ln2, g.norm2.gain, g.norm2.bias);
  Tensor d_c = d_s2;
  dropout_backward(d_c, tr.drop_cross);
  MhaGrads cg = multi_head_attention_backward(tr.y1, memory, p.cross_attn, tr.cross_attn, d_c);
  add_mha_grads(g.cross_attn, cg.d_w);
  add_inplace(d_memory, cg.d_x_kv);
  Tensor d_y1 = add(d_s2, cg.d_x_q);

  Tensor d_s1 = layer_norm_backward(d_y1, p.norm1.gain, tr.ln1, g.norm1.gain, g.norm1.bias);
  Tensor d_a = d_s1;
  dropout_backward(d_a, tr.drop_self);
  MhaGrads sg = multi_head_attention_backward(tr.input, tr.input, p.self_attn, tr.self_attn, d_a);
  add_mha_grads(g.self_attn, sg.d_w);
  add_inplace(d_s1, sg.d_x_q);
  add_inplace(d_s1, sg.d_x_kv);
  return d_s1;
}

void check_length(std::size_t length, const ModelConfig& config, const char* what) {
  if (length > static_cast<std::size_t>(config.max_positions)) {
    throw InputError(std::string(what) + " length " + std::to_string(length) + " exceeds max_positions " +
                     std::to_string(config.max_positions));
  }
}

struct ForwardTrace {
  std::vector<EncoderLayerTrace> encoder;
  Tensor memory;
  std::vector<DecoderLayerTrace> decoder;
  Tensor decoder_out;
};

Tensor run_encoder(const std::vector<int>& ids, const ModelParams& params, const ModelConfig& config,
                   SeededRng* rng, std::vector<EncoderLayerTrace>* traces) {
  Tensor x = embed(ids, params, config);
  const MaskMatrix mask = MaskMatrix::all(ids.size(), ids.size());
  if (traces != nullptr) traces->resize(params.encoder.size());
  for (std::size_t l = 0; l < params.encoder.size(); ++l) {
    x = encoder_layer_forward(x, params.encoder[l], config, mask, rng, traces ? &(*traces)[l] : nullptr);
  }
  return x;
}

Tensor run_decoder(const Tensor& inputs, const Tensor& memory, const ModelParams& params,
                   const ModelConfig& config, SeededRng* rng, std::vector<DecoderLayerTrace>* traces) {
  const std::size_t t = inputs.rows();
  const MaskMatrix self_mask = build_mask(config.mask, t);
  const MaskMatrix cross_mask = MaskMatrix::all(t, memory.rows());
  if (traces != nullptr) traces->resize(params.decoder.size());
  Tensor x = inputs;
  for (std::size_t l = 0; l < params.decoder.size(); ++l) {
    x = decoder_layer_forward(x, memory, params.decoder[l], config, self_mask, cross_mask, rng,
                              traces ? &(*traces)[l] : nullptr);
  }
  return x;
}

void check_target(const TokenSequence& target) {
  if (target.ids.empty() || target.ids.front() != kBos) {
    throw InputError("target sequence must start with BOS");
  }
  bool content = false;
  for (std::size_t i = 1; i < target.ids.size(); ++i) {
    const int id = target.ids[i];
    if (id != kBos && id != kEos && id != kPad) content = true;
  }
  if (!content) throw InputError("target is empty after stripping BOS/EOS/PAD");
}

void accumulate_embedding_grad(Tensor& d_embedding, const std::vector<int>& ids, const Tensor& d_inputs,
                               double scale) {
  for (std::size_t t = 0; t < ids.size(); ++t) {
    auto dst = d_embedding.row(static_cast<std::size_t>(ids[t]));
    auto src = d_inputs.row(t);
    for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += scale * src[j];
  }
}

}  // namespace

// ---------------------------------------------------------------------------

void ModelConfig::validate() const {
  if (num_layers < 1) throw ConfigError("num_layers must be >= 1");
  if (num_heads < 1) throw ConfigError("num_heads must be >= 1");
  if (d_model < 2 || d_model % 2 != 0) throw ConfigError("d_model must be even and >= 2, got " + std::to_string(d_model));
  if (d_model % num_heads != 0) {
    throw ConfigError("num_heads " + std::to_string(num_heads) + " does not divide d_model " + std::to_string(d_model));
  }
  if (d_ff < 1) throw ConfigError("d_ff must be >= 1");
  if (vocab_size <= kFirstContentToken) throw ConfigError("vocab_size must exceed the 3 special tokens");
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) throw ConfigError("dropout_rate must lie in [0, 1)");
  if (!(layer_norm_eps > 0.0)) throw ConfigError("layer_norm_eps must be positive");
  if (max_positions < 1) throw ConfigError("max_positions must be >= 1");
  if (mask.kind == MaskKind::full) {
    throw ConfigError("decoder self-attention mask must be causal or ngram; full would expose future tokens");
  }
  try {
    mask.validate();
  } catch (const InvalidOrderError& e) {
    throw ConfigError(e.what());
  }
}

std::vector<std::pair<std::string, std::string>> ModelConfig::to_key_values() const {
  return {
      {"num_layers", std::to_string(num_layers)},
      {"num_heads", std::to_string(num_heads)},
      {"d_model", std::to_string(d_model)},
      {"d_ff", std::to_string(d_ff)},
      {"vocab_size", std::to_string(vocab_size)},
      {"mask", to_string(mask.kind)},
      {"ngram_order", std::to_string(mask.order)},
      {"dropout_rate", format_double(dropout_rate)},
      {"layer_norm_eps", format_double(layer_norm_eps)},
      {"max_positions", std::to_string(max_positions)},
  };
}

ModelConfig ModelConfig::from_key_values(const std::map<std::string, std::string>& kv) {
  ModelConfig c;
  c.num_layers = parse_int(kv, "num_layers", c.num_layers);
  c.num_heads = parse_int(kv, "num_heads", c.num_heads);
  c.d_model = parse_int(kv, "d_model", c.d_model);
  c.d_ff = parse_int(kv, "d_ff", c.d_ff);
  c.vocab_size = parse_int(kv, "vocab_size", c.vocab_size);
  if (auto it = kv.find("mask"); it != kv.end()) {
    try {
      c.mask.kind = parse_mask_kind(it->second);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
  }
  c.mask.order = parse_int(kv, "ngram_order", c.mask.kind == MaskKind::ngram ? 8 : 0);
  if (c.mask.kind != MaskKind::ngram) c.mask.order = 0;
  c.dropout_rate = parse_double(kv, "dropout_rate", c.dropout_rate);
  c.layer_norm_eps = parse_double(kv, "layer_norm_eps", c.layer_norm_eps);
  c.max_positions = parse_int(kv, "max_positions", c.max_positions);
  c.validate();
  return c;
}

void check_ids(const TokenSequence& seq, int vocab_size) {
  if (seq.ids.empty()) throw InputError("token sequence is empty");
  for (std::size_t i = 0; i < seq.ids.size(); ++i) {
    const int id = seq.ids[i];
    if (id < 0 || id >= vocab_size) {
      throw InputError("token id " + std::to_string(id) + " at index " + std::to_string(i) +
                       " is outside the vocabulary [0, " + std::to_string(vocab_size) + ")");
    }
  }
}

void ModelParams::for_each(const std::function<void(const std::string&, Tensor&)>& fn) { visit_params(*this, fn); }

void ModelParams::for_each(const std::function<void(const std::string&, const Tensor&)>& fn) const {
  visit_params(*this, fn);
}

std::size_t ModelParams::parameter_count() const {
  std::size_t n = 0;
  for_each([&](const std::string&, const Tensor& t) { n += t.size(); });
  return n;
}

ModelParams ModelParams::zeros_like() const {
  ModelParams out = *this;
  out.for_each([](const std::string&, Tensor& t) { t.fill(0.0); });
  return out;
}

bool ModelParams::operator==(const ModelParams& other) const {
  std::vector<const Tensor*> mine, theirs;
  for_each([&](const std::string&, const Tensor& t) { mine.push_back(&t); });
  other.for_each([&](const std::string&, const Tensor& t) { theirs.push_back(&t); });
  if (mine.size() != theirs.size()) return false;
  for (std::size_t i = 0; i < mine.size(); ++i) {
    if (!(*mine[i] == *theirs[i])) return false;
  }
  return true;
}

ModelParams init_params(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  SeededRng rng(seed);
  const auto d = static_cast<std::size_t>(config.d_model);
  const auto d_ff = static_cast<std::size_t>(config.d_ff);
  const auto v = static_cast<std::size_t>(config.vocab_size);
  const auto heads = static_cast<std::size_t>(config.num_heads);

  ModelParams p;
  p.embedding = xavier_init(rng, v, d);
  for (int l = 0; l < config.num_layers; ++l) {
    EncoderLayerParams layer;
    layer.self_attn = MhaWeights::xavier(rng, d, heads);
    layer.norm1 = unit_norm(d);
    layer.ffn = init_ffn(rng, d, d_ff);
    layer.norm2 = unit_norm(d);
    p.encoder.push_back(std::move(layer));
  }
  for (int l = 0; l < config.num_layers; ++l) {
    DecoderLayerParams layer;
    layer.self_attn = MhaWeights::xavier(rng, d, heads);
    layer.norm1 = unit_norm(d);
    layer.cross_attn = MhaWeights::xavier(rng, d, heads);
    layer.norm2 = unit_norm(d);
    layer.ffn = init_ffn(rng, d, d_ff);
    layer.norm3 = unit_norm(d);
    p.decoder.push_back(std::move(layer));
  }
  p.output_proj = Tensor::zeros(d, v);
  return p;
}

void check_params(const ModelParams& params, const ModelConfig& config) {
  const ModelParams expected = [&] {
    ModelConfig c = config;
    c.validate();
    ModelParams shapes;
    const auto d = static_cast<std::size_t>(c.d_model);
    const auto d_ff = static_cast<std::size_t>(c.d_ff);
    const auto heads = static_cast<std::size_t>(c.num_heads);
    shapes.embedding = Tensor::zeros(static_cast<std::size_t>(c.vocab_size), d);
    for (int l = 0; l < c.num_layers; ++l) {
      shapes.encoder.push_back({MhaWeights::zeros(d, heads), unit_norm(d),
                                {Tensor::zeros(d, d_ff), Tensor::vector(d_ff), Tensor::zeros(d_ff, d), Tensor::vector(d)},
                                unit_norm(d)});
      shapes.decoder.push_back({MhaWeights::zeros(d, heads), unit_norm(d), MhaWeights::zeros(d, heads), unit_norm(d),
                                {Tensor::zeros(d, d_ff), Tensor::vector(d_ff), Tensor::zeros(d_ff, d), Tensor::vector(d)},
                                unit_norm(d)});
    }
    shapes.output_proj = Tensor::zeros(d, static_cast<std::size_t>(c.vocab_size));
    return shapes;
  }();
  std::vector<std::pair<std::string, Shape>> want, have;
  expected.for_each([&](const std::string& n, const Tensor& t) { want.emplace_back(n, t.shape()); });
  params.for_each([&](const std::string& n, const Tensor& t) { have.emplace_back(n, t.shape()); });
  if (want.size() != have.size()) {
    throw ConfigError("parameter set has " + std::to_string(have.size()) + " tensors, config implies " +
                      std::to_string(want.size()));
  }
  for (std::size_t i = 0; i < want.size(); ++i) {
    if (want[i] != have[i]) {
      throw ConfigError("parameter " + have[i].first + " has shape " + shape_to_string(have[i].second) +
                        ", config implies " + want[i].first + " " + shape_to_string(want[i].second));
    }
  }
  for (const auto& layer : params.encoder) {
    if (layer.self_attn.heads != static_cast<std::size_t>(config.num_heads)) throw ConfigError("head count mismatch");
  }
  for (const auto& layer : params.decoder) {
    if (layer.self_attn.heads != static_cast<std::size_t>(config.num_heads) ||
        layer.cross_attn.heads != static_cast<std::size_t>(config.num_heads)) {
      throw ConfigError("head count mismatch");
    }
  }
}

void sinusoidal_position_row(std::size_t position, std::span<double> out) {
  const std::size_t d = out.size();
  const double p = static_cast<double>(position);
  for (std::size_t i = 0; i + 1 < d; i += 2) {
    const double rate = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(d));
    out[i] = std::sin(p * rate);
    out[i + 1] = std::cos(p * rate);
  }
}

Tensor sinusoidal_positions(std::size_t length, std::size_t d_model) {
  if (d_model == 0 || d_model % 2 != 0) {
    throw ConfigError("sinusoidal_positions: d_model must be even, got " + std::to_string(d_model));
  }
  Tensor out = Tensor::zeros(length, d_model);
  for (std::size_t p = 0; p < length; ++p) sinusoidal_position_row(p, out.row(p));
  return out;
}

Tensor embed(const std::vector<int>& ids, const ModelParams& params, const ModelConfig& config) {
  const auto d = static_cast<std::size_t>(config.d_model);
  const double scale = std::sqrt(static_cast<double>(d));
  Tensor x = sinusoidal_positions(ids.size(), d);
  for (std::size_t t = 0; t < ids.size(); ++t) {
    auto e = params.embedding.row(static_cast<std::size_t>(ids[t]));
    auto row = x.row(t);
    for (std::size_t j = 0; j < d; ++j) row[j] += scale * e[j];
  }
  return x;
}

Tensor encode(const TokenSequence& source, const ModelParams& params, const ModelConfig& config) {
  check_ids(source, config.vocab_size);
  check_length(source.size(), config, "source");
  return run_encoder(source.ids, params, config, nullptr, nullptr);
}

Tensor decode_embedded(const Tensor& inputs, const Tensor& memory, const ModelParams& params,
                       const ModelConfig& config) {
  check_length(inputs.rows(), config, "target prefix");
  if (inputs.cols() != static_cast<std::size_t>(config.d_model) || memory.cols() != inputs.cols()) {
    throw DimensionError("decode: inputs " + shape_to_string(inputs.shape()) + " and memory " +
                         shape_to_string(memory.shape()) + " must have width " + std::to_string(config.d_model));
  }
  return matmul(run_decoder(inputs, memory, params, config, nullptr, nullptr), params.output_proj);
}

Tensor decode_full(const TokenSequence& target_prefix, const Tensor& memory, const ModelParams& params,
                   const ModelConfig& config) {
  check_ids(target_prefix, config.vocab_size);
  check_length(target_prefix.size(), config, "target prefix");
  return decode_embedded(embed(target_prefix.ids, params, config), memory, params, config);
}

namespace {

// Runs the teacher-forced forward pass, optionally recording a trace, and
// fills d_logits with the gradient of the mean NLL when requested.
LossResult forward_with_trace(const TokenSequence& source, const TokenSequence& target, const ModelParams& params,
                              const ModelConfig& config, SeededRng* rng, ForwardTrace* trace, Tensor* d_logits) {
  check_ids(source, config.vocab_size);
  check_ids(target, config.vocab_size);
  check_target(target);
  check_length(source.size(), config, "source");
  check_length(target.size(), config, "target");

  Tensor memory = run_encoder(source.ids, params, config, rng, trace ? &trace->encoder : nullptr);
  Tensor dec_out = run_decoder(embed(target.ids, params, config), memory, params, config, rng,
                               trace ? &trace->decoder : nullptr);
  LossResult result;
  result.logits = matmul(dec_out, params.output_proj);

  const std::size_t t = target.size();
  const std::size_t v = result.logits.cols();
  if (d_logits != nullptr) *d_logits = Tensor::zeros(t, v);
  std::vector<std::size_t> scored;
  for (std::size_t k = 0; k + 1 < t; ++k) {
    const int next = target.ids[k + 1];
    if (next == kPad) continue;
    auto row = result.logits.row(k);
    double mx = row[0];
    for (double x : row) mx = std::max(mx, x);
    double sum = 0.0;
    for (double x : row) sum += std::exp(x - mx);
    const double log_z = mx + std::log(sum);
    result.total_nll += log_z - row[static_cast<std::size_t>(next)];
    scored.push_back(k);
    if (d_logits != nullptr) {
      auto g = d_logits->row(k);
      for (std::size_t j = 0; j < v; ++j) g[j] = std::exp(row[j] - log_z);
      g[static_cast<std::size_t>(next)] -= 1.0;
    }
  }
  result.predicted = scored.size();
  result.loss = result.total_nll / static_cast<double>(result.predicted);
  if (d_logits != nullptr) scale_inplace(*d_logits, 1.0 / static_cast<double>(result.predicted));
  if (trace != nullptr) {
    trace->memory = std::move(memory);
    trace->decoder_out = std::move(dec_out);
  }
  return result;
}

}  // namespace

LossResult model_forward_loss(const TokenSequence& source, const TokenSequence& target, const ModelParams& params,
                              const ModelConfig& config, SeededRng* dropout_rng) {
  return forward_with_trace(source, target, params, config, dropout_rng, nullptr, nullptr);
}

LossAndGrad model_backward(const TokenSequence& source, const TokenSequence& target, const ModelParams& params,
                           const ModelConfig& config, SeededRng* dropout_rng) {
  ForwardTrace trace;
  Tensor d_logits;
  LossResult fwd = forward_with_trace(source, target, params, config, dropout_rng, &trace, &d_logits);

  LossAndGrad out;
  out.loss = fwd.loss;
  out.predicted = fwd.predicted;
  out.grads = params.zeros_like();
  ModelParams& g = out.grads;

  accumulate_matmul_at(g.output_proj, trace.decoder_out, d_logits);
  Tensor d_x = matmul_bt(d_logits, params.output_proj);
  Tensor d_memory(trace.memory.shape());
  for (std::size_t l = params.decoder.size(); l-- > 0;) {
    d_x = decoder_layer_backward(params.decoder[l], trace.decoder[l], trace.memory, d_x, g.decoder[l], d_memory);
  }
  const double scale = std::sqrt(static_cast<double>(config.d_model));
  accumulate_embedding_grad(g.embedding, target.ids, d_x, scale);

  Tensor d_enc = std::move(d_memory);
  for (std::size_t l = params.encoder.size(); l-- > 0;) {
    d_enc = encoder_layer_backward(params.encoder[l], trace.encoder[l], d_enc, g.encoder[l]);
  }
  accumulate_embedding_grad(g.embedding, source.ids, d_enc, scale);
  return out;
}

}  // namespace ngram
