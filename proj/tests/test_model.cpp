#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <sstream>

#include "ngram/model.hpp"
#include "ngram/training.hpp"
#include "oracles.hpp"
#include "pinned.hpp"

using namespace ngram;

namespace {

ModelConfig small_config(int layers, int heads, int d, int vocab, MaskSpec mask) {
  ModelConfig c;
  c.num_layers = layers;
  c.num_heads = heads;
  c.d_model = d;
  c.d_ff = 2 * d;
  c.vocab_size = vocab;
  c.mask = mask;
  return c;
}

ModelParams random_params(const ModelConfig& cfg, std::uint64_t seed) {
  ModelParams p = init_params(cfg, seed);
  SeededRng rng(seed + 100);
  p.output_proj = xavier_init(rng, static_cast<std::size_t>(cfg.d_model), static_cast<std::size_t>(cfg.vocab_size));
  // Non-trivial norms and biases so the oracle comparison covers them.
  p.for_each([&](const std::string& name, Tensor& t) {
    if (name.find("gain") != std::string::npos || name.find(".b") != std::string::npos ||
        name.find("bias") != std::string::npos) {
      for (double& v : t.data()) v += rng.uniform(-0.3, 0.3);
    }
  });
  return p;
}

std::vector<int> random_tokens(SeededRng& rng, std::size_t n, int vocab, bool as_target) {
  std::vector<int> ids;
  if (as_target) ids.push_back(kBos);
  while (ids.size() < n) ids.push_back(kFirstContentToken + static_cast<int>(rng.below(vocab - kFirstContentToken)));
  return ids;
}

struct Golden {
  std::vector<double> encode;
  double batch_loss = 0.0;
};

Golden read_golden() {
  std::ifstream in(std::string(NGRAM_TEST_DATA_DIR) + "/golden/model_values.txt");
  Golden g;
  std::string line;
  std::getline(in, line);  // "encode"
  std::getline(in, line);
  std::istringstream values(line);
  double v = 0.0;
  while (values >> v) g.encode.push_back(v);
  std::getline(in, line);  // "batch_loss"
  in >> g.batch_loss;
  return g;
}

}  // namespace

TEST(Positions, FirstPositionAlternatesZeroOne) {
  const Tensor p = sinusoidal_positions(4, 10);
  for (std::size_t c = 0; c < 10; ++c) EXPECT_EQ(p(0, c), c % 2 == 0 ? 0.0 : 1.0);
  for (double v : sinusoidal_positions(50, 16).data()) {
    EXPECT_GE(v, -1.0);
    EXPECT_LE(v, 1.0);
  }
  EXPECT_DOUBLE_EQ(p(3, 0), std::sin(3.0));
  EXPECT_DOUBLE_EQ(p(3, 1), std::cos(3.0));
  EXPECT_DOUBLE_EQ(p(3, 2), std::sin(3.0 / std::pow(10000.0, 2.0 / 10.0)));
  EXPECT_THROW(sinusoidal_positions(3, 7), ConfigError);
}

TEST(Config, Validation) {
  ModelConfig c;
  EXPECT_NO_THROW(c.validate());
  c.num_heads = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  c = ModelConfig{};
  c.mask = MaskSpec::full();
  EXPECT_THROW(c.validate(), ConfigError);
  c.mask = MaskSpec::ngram(1);
  EXPECT_THROW(c.validate(), ConfigError);
  c = ModelConfig{};
  c.d_model = 7;
  c.num_heads = 1;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Config, KeyValueRoundTrip) {
  ModelConfig c = small_config(3, 2, 12, 20, MaskSpec::ngram(5));
  c.dropout_rate = 0.25;
  std::map<std::string, std::string> kv;
  for (const auto& [k, v] : c.to_key_values()) kv[k] = v;
  EXPECT_EQ(ModelConfig::from_key_values(kv), c);
}

TEST(Encode, ShapeOrderSensitivityAndErrors) {
  const ModelConfig cfg = pinned::tiny_config();
  const ModelParams p = random_params(cfg, 3);
  const Tensor a = encode(TokenSequence::source({4, 6, 8, 2}), p, cfg);
  EXPECT_EQ(a.shape(), (Shape{4, 8}));
  const Tensor b = encode(TokenSequence::source({6, 4, 8, 2}), p, cfg);
  EXPECT_GT(max_abs_diff(a, b), 1e-6);
  EXPECT_THROW(encode(TokenSequence::source({4, 11}), p, cfg), InputError);
  EXPECT_THROW(encode(TokenSequence::source({}), p, cfg), InputError);
}

TEST(Encode, GoldenOutput) {
  const Golden g = read_golden();
  const Tensor out = encode(pinned::tiny_source(), pinned::tiny_params(), pinned::tiny_config());
  ASSERT_EQ(out.size(), g.encode.size());
  for (std::size_t i = 0; i < out.size(); ++i) EXPECT_NEAR(out[i], g.encode[i], 1e-12) << i;
}

TEST(DecodeFull, TinyModelMatchesWindowedOracle) {
  const ModelConfig cfg = small_config(2, 2, 8, 11, MaskSpec::ngram(3));
  const ModelParams p = random_params(cfg, 5);
  SeededRng rng(6);
  const auto src = random_tokens(rng, 5, 11, false);
  const auto tgt = random_tokens(rng, 6, 11, true);
  const Tensor logits = decode_full(TokenSequence::target(tgt), encode(TokenSequence::source(src), p, cfg), p, cfg);
  EXPECT_LE(max_abs_diff(logits, oracle::model_logits(src, tgt, p, cfg)), 1e-10);
}

TEST(DecodeFull, PropertyWindowedOracleAcrossConfigs) {
  SeededRng rng(7);
  const MaskSpec masks[] = {MaskSpec::causal(), MaskSpec::ngram(2), MaskSpec::ngram(3), MaskSpec::ngram(5)};
  for (int trial = 0; trial < 12; ++trial) {
    const int layers = 1 + static_cast<int>(rng.below(3));
    const int heads = 1 + static_cast<int>(rng.below(2));
    const ModelConfig cfg = small_config(layers, heads, 4 * heads, 13, masks[rng.below(4)]);
    const ModelParams p = random_params(cfg, 100 + trial);
    const auto src = random_tokens(rng, 1 + rng.below(7), 13, false);
    const auto tgt = random_tokens(rng, 1 + rng.below(12), 13, true);
    const Tensor logits =
        decode_full(TokenSequence::target(tgt), encode(TokenSequence::source(src), p, cfg), p, cfg);
    EXPECT_LE(max_abs_diff(logits, oracle::model_logits(src, tgt, p, cfg)), 1e-10) << trial;
  }
}

TEST(DecodeFull, DegenerateNgramBitIdenticalToCausal) {
  SeededRng rng(8);
  for (int trial = 0; trial < 5; ++trial) {
    const auto tgt = random_tokens(rng, 2 + rng.below(7), 11, true);
    ModelConfig causal = small_config(2, 2, 8, 11, MaskSpec::causal());
    ModelConfig ngram = causal;
    ngram.mask = MaskSpec::ngram(static_cast<int>(tgt.size()) + static_cast<int>(rng.below(3)));
    const ModelParams p = random_params(causal, 200 + trial);
    const Tensor mem = encode(TokenSequence::source({3, 4, 5}), p, causal);
    EXPECT_EQ(decode_full(TokenSequence::target(tgt), mem, p, causal),
              decode_full(TokenSequence::target(tgt), mem, p, ngram));
  }
}

TEST(DecodeFull, PropertyCausality) {
  SeededRng rng(9);
  for (const MaskSpec mask : {MaskSpec::causal(), MaskSpec::ngram(3)}) {
    const ModelConfig cfg = small_config(2, 2, 8, 11, mask);
    const ModelParams p = random_params(cfg, 9);
    const Tensor mem = encode(TokenSequence::source({3, 4, 5, 2}), p, cfg);
    auto tgt = random_tokens(rng, 7, 11, true);
    const Tensor base = decode_full(TokenSequence::target(tgt), mem, p, cfg);
    auto longer = tgt;
    longer.push_back(6);
    const Tensor extended = decode_full(TokenSequence::target(longer), mem, p, cfg);
    for (std::size_t k = 0; k < tgt.size(); ++k) {
      for (std::size_t j = 0; j < base.cols(); ++j) EXPECT_EQ(base(k, j), extended(k, j));
    }
    auto changed = tgt;
    changed[5] = changed[5] == 3 ? 4 : 3;
    const Tensor other = decode_full(TokenSequence::target(changed), mem, p, cfg);
    for (std::size_t k = 0; k < 5; ++k) {
      for (std::size_t j = 0; j < base.cols(); ++j) EXPECT_EQ(base(k, j), other(k, j));
    }
  }
}

TEST(DecodeFull, PrefixLongerThanMaxPositions) {
  ModelConfig cfg = small_config(1, 1, 4, 11, MaskSpec::causal());
  cfg.max_positions = 4;
  const ModelParams p = init_params(cfg, 1);
  const Tensor mem = encode(TokenSequence::source({3, 2}), p, cfg);
  EXPECT_THROW(decode_full(TokenSequence::target({1, 3, 3, 3, 3}), mem, p, cfg), InputError);
}

TEST(Loss, ZeroProjectionGivesLogV) {
  const ModelConfig cfg = small_config(2, 2, 8, 11, MaskSpec::ngram(3));
  const ModelParams p = init_params(cfg, 4);
  const auto r = model_forward_loss(TokenSequence::source({3, 4, 2}), TokenSequence::target({1, 3, 4, 2}), p, cfg);
  EXPECT_EQ(r.loss, std::log(11.0));
  EXPECT_EQ(r.predicted, 3u);
}

TEST(Loss, NonNegativeAndErrors) {
  const ModelConfig cfg = pinned::tiny_config();
  const ModelParams p = pinned::tiny_params();
  for (const auto& ex : pinned::tiny_batch()) {
    EXPECT_GE(model_forward_loss(ex.source, ex.target, p, cfg).loss, 0.0);
  }
  const auto src = TokenSequence::source({3, 2});
  EXPECT_THROW(model_forward_loss(src, TokenSequence::target({1, 2}), p, cfg), InputError);
  EXPECT_THROW(model_forward_loss(src, TokenSequence::target({3, 4, 2}), p, cfg), InputError);
}

TEST(Loss, GoldenBatchLoss) {
  const Golden g = read_golden();
  EXPECT_NEAR(batch_loss(pinned::tiny_params(), pinned::tiny_batch(), pinned::tiny_config()), g.batch_loss, 1e-12);
}

TEST(Backward, UnusedEmbeddingRowsAreZero) {
  const ModelConfig cfg = pinned::tiny_config();
  const auto g = model_backward(TokenSequence::source({3, 4, 2}), TokenSequence::target({1, 4, 3, 2}),
                                pinned::tiny_params(), cfg);
  for (int token : {0, 5, 6, 7, 8, 9, 10}) {
    for (double v : g.grads.embedding.row(static_cast<std::size_t>(token))) EXPECT_EQ(v, 0.0) << token;
  }
  double used = 0.0;
  for (double v : g.grads.embedding.row(4)) used += std::abs(v);
  EXPECT_GT(used, 0.0);
}

TEST(Backward, PadPositionsContributeNothing) {
  const ModelConfig cfg = pinned::tiny_config();
  const ModelParams p = pinned::tiny_params();
  const auto src = TokenSequence::source({5, 6, 2});
  const auto plain = model_backward(src, TokenSequence::target({1, 5, 6, 2}), p, cfg);
  const auto padded = model_backward(src, TokenSequence::target({1, 5, 6, 2, 0, 0}), p, cfg);
  EXPECT_EQ(plain.predicted, padded.predicted);
  EXPECT_NEAR(plain.loss, padded.loss, 1e-15);
  std::vector<const Tensor*> a;
  plain.grads.for_each([&](const std::string&, const Tensor& t) { a.push_back(&t); });
  std::size_t i = 0;
  padded.grads.for_each([&](const std::string& name, const Tensor& t) {
    const Tensor& reference = *a[i++];
    for (std::size_t j = 0; j < t.size(); ++j) {
      if (name == "embedding" && j < static_cast<std::size_t>(cfg.d_model)) continue;  // PAD row is fed
      EXPECT_NEAR(t[j], reference[j], 1e-14) << name << "[" << j << "]";
    }
  });
}

TEST(Backward, EveryParameterMatchesFiniteDifferences) {
  const ModelConfig cfg = pinned::tiny_config();
  ModelParams p = pinned::tiny_params();
  const auto batch = pinned::tiny_batch();
  const auto slice = std::vector<Example>(batch.begin(), batch.begin() + 2);
  const BatchGrad analytic = batch_backward(p, slice, cfg);
  std::vector<const Tensor*> grads;
  analytic.grads.for_each([&](const std::string&, const Tensor& t) { grads.push_back(&t); });
  const double h = 1e-5;
  const double center = batch_loss(p, slice, cfg);
  std::size_t i = 0, checked = 0;
  p.for_each([&](const std::string& name, Tensor& t) {
    const Tensor& g = *grads[i++];
    for (std::size_t j = 0; j < t.size(); ++j) {
      const double saved = t[j];
      t[j] = saved + h;
      const double up = batch_loss(p, slice, cfg);
      t[j] = saved - h;
      const double down = batch_loss(p, slice, cfg);
      t[j] = saved;
      // A ReLU switching inside [θ-h, θ+h] makes the one-sided slopes disagree; no derivative exists there.
      if (std::abs((up - center) - (center - down)) / h > 1e-3) continue;
      const double numeric = (up - down) / (2 * h);
      // Central differences carry about eps * loss / h of roundoff, so tiny gradients get an absolute floor.
      const double scale = std::max(std::abs(g[j]), std::abs(numeric));
      EXPECT_LE(std::abs(g[j] - numeric), 1e-5 * scale + 1e-9)
          << name << "[" << j << "] analytic " << g[j] << " numeric " << numeric;
      ++checked;
    }
  });
  EXPECT_GT(checked, p.parameter_count() * 9 / 10);
}

TEST(Backward, DegenerateNgramBitIdenticalGradients) {
  const ModelConfig causal = small_config(2, 2, 8, 11, MaskSpec::causal());
  ModelConfig ngram = causal;
  ngram.mask = MaskSpec::ngram(8);
  const ModelParams p = random_params(causal, 12);
  const auto src = TokenSequence::source({3, 5, 7, 2});
  const auto tgt = TokenSequence::target({1, 4, 6, 8, 10, 2});
  const auto a = model_backward(src, tgt, p, causal);
  const auto b = model_backward(src, tgt, p, ngram);
  EXPECT_EQ(a.loss, b.loss);
  EXPECT_TRUE(a.grads == b.grads);
}

namespace {

Tensor band_logits(const Tensor& inputs, const Tensor& memory, const ModelParams& p, const ModelConfig& cfg) {
  return decode_embedded(inputs, memory, p, cfg);
}

}  // namespace

TEST(ReceptiveField, BandIsExactlyOnePlusLTimesNMinusTwo) {
  for (const auto [layers, order] : std::vector<std::pair<int, int>>{{1, 3}, {2, 3}, {2, 4}, {3, 4}}) {
    const ModelConfig cfg = small_config(layers, 2, 8, 11, MaskSpec::ngram(order));
    ModelParams p = random_params(cfg, 300 + layers * 10 + order);
    for (auto& layer : p.decoder) layer.cross_attn.wo.fill(0.0);
    SeededRng rng(static_cast<std::uint64_t>(layers * 100 + order));
    const std::size_t t = 16;
    const Tensor inputs = oracle::random_tensor(rng, t, 8);
    const Tensor memory = oracle::random_tensor(rng, 3, 8);
    const Tensor base = band_logits(inputs, memory, p, cfg);
    const std::size_t reach = static_cast<std::size_t>(layers * (order - 2));
    for (std::size_t j = 0; j < t; ++j) {
      Tensor moved = inputs;
      for (double& v : moved.row(j)) v += rng.uniform(-0.1, 0.1);
      const Tensor out = band_logits(moved, memory, p, cfg);
      for (std::size_t k = 0; k < t; ++k) {
        double diff = 0.0;
        for (std::size_t c = 0; c < out.cols(); ++c) diff = std::max(diff, std::abs(out(k, c) - base(k, c)));
        if (k < j || k - j > reach) {
          EXPECT_LE(diff, 1e-12) << "L=" << layers << " N=" << order << " j=" << j << " k=" << k;
        } else {
          EXPECT_GE(diff, 1e-8) << "L=" << layers << " N=" << order << " j=" << j << " k=" << k;
        }
      }
    }
  }
}

TEST(ReceptiveField, ContextReachesBeyondOneWindow) {
  // One layer of N=3 reaches one position back; two layers reach two.
  const ModelConfig cfg = small_config(2, 2, 8, 11, MaskSpec::ngram(3));
  ModelParams p = random_params(cfg, 44);
  for (auto& layer : p.decoder) layer.cross_attn.wo.fill(0.0);
  const Tensor mem = encode(TokenSequence::source({3, 2}), p, cfg);
  std::vector<int> a{1, 3, 4, 5, 6, 7, 8};
  std::vector<int> b = a;
  b[2] = 9;  // two before index 4
  const Tensor la = decode_full(TokenSequence::target(a), mem, p, cfg);
  const Tensor lb = decode_full(TokenSequence::target(b), mem, p, cfg);
  double diff = 0.0;
  for (std::size_t c = 0; c < la.cols(); ++c) diff = std::max(diff, std::abs(la(4, c) - lb(4, c)));
  EXPECT_GT(diff, 1e-8);
  for (std::size_t c = 0; c < la.cols(); ++c) EXPECT_EQ(la(5, c) - lb(5, c), 0.0);
}

TEST(Checkpoint, RoundTripAndFormat) {
  const ModelConfig cfg = pinned::tiny_config();
  const ModelParams p = pinned::tiny_params();
  std::stringstream buf(std::ios::in | std::ios::out | std::ios::binary);
  write_checkpoint(buf, cfg, p);
  const std::string bytes = buf.str();
  EXPECT_EQ(bytes.rfind("NGRAMCKPT 1\n", 0), 0u);
  EXPECT_NE(bytes.find("mask = ngram\n"), std::string::npos);
  EXPECT_NE(bytes.find("ngram_order = 3\n"), std::string::npos);
  const Checkpoint back = read_checkpoint(buf);
  EXPECT_EQ(back.config, cfg);
  EXPECT_TRUE(back.params == p);
  std::stringstream again(std::ios::in | std::ios::out | std::ios::binary);
  write_checkpoint(again, back.config, back.params);
  EXPECT_EQ(again.str(), bytes);
}

TEST(Checkpoint, RejectsCorruptInput) {
  std::stringstream bad("NOTACKPT\n");
  EXPECT_ANY_THROW(read_checkpoint(bad));
  std::stringstream buf(std::ios::in | std::ios::out | std::ios::binary);
  write_checkpoint(buf, pinned::tiny_config(), pinned::tiny_params());
  std::string truncated = buf.str();
  truncated.resize(truncated.size() - 9);
  std::stringstream cut(truncated);
  EXPECT_ANY_THROW(read_checkpoint(cut));
}

TEST(Params, NamesCountsAndShapes) {
  const ModelConfig cfg = pinned::tiny_config();
  const ModelParams p = init_params(cfg, 1);
  std::vector<std::string> names;
  p.for_each([&](const std::string& n, const Tensor&) { names.push_back(n); });
  EXPECT_EQ(names.front(), "embedding");
  EXPECT_EQ(names.back(), "output_proj");
  EXPECT_NE(std::find(names.begin(), names.end(), "decoder.1.cross_attn.wk"), names.end());
  EXPECT_NO_THROW(check_params(p, cfg));
  EXPECT_TRUE(init_params(cfg, 1) == p);
  for (double v : p.output_proj.data()) EXPECT_EQ(v, 0.0);
  ModelConfig wider = cfg;
  wider.d_model = 10;
  EXPECT_ANY_THROW(check_params(p, wider));
}
