#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "ngram/model.hpp"

namespace ngram {

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Optimizer

struct AdamOptions {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  AdamOptions options;
  std::vector<Tensor> first_moment;
  std::vector<Tensor> second_moment;
  std::uint64_t step = 0;

  static AdamState for_params(const ModelParams& params, AdamOptions options = {});
};

/// Bias-corrected Adam over parallel lists of parameter and gradient tensors.
void adam_step(std::span<Tensor* const> params, std::span<const Tensor* const> grads, AdamState& state);
void adam_step(ModelParams& params, const ModelParams& grads, AdamState& state);

// ---------------------------------------------------------------------------
// Gradient checking

struct GradCheckReport {
  double max_relative_error = 0.0;
  std::string worst_parameter;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t samples = 0;
  /// Draws discarded because loss(θ-h), loss(θ), loss(θ+h) straddle a ReLU kink.
  std::size_t skipped_nonsmooth = 0;
};

struct GradSlot {
  std::string name;
  Tensor* value;
  const Tensor* grad;
};

/// |a - n| / max(|a|, |n|, 1e-12)
double relative_error(double analytic, double numeric);

/// Compares analytic gradients with central differences (loss(θ+h) - loss(θ-h)) / 2h.
/// The first draws visit every tensor once (while samples remain); the rest
/// pick tensors and indices uniformly. Parameters are restored after probing.
/// A draw whose one-sided slopes differ by more than kink_tolerance is
/// redrawn (at most sample_size times in total).
inline constexpr double kDefaultKinkTolerance = 1e-3;
GradCheckReport check_gradients(std::span<const GradSlot> slots, const std::function<double()>& loss, double h,
                                std::size_t sample_size, SeededRng& rng,
                                double kink_tolerance = kDefaultKinkTolerance);

struct Example {
  TokenSequence source;
  TokenSequence target;
};

/// Mean per-example loss and its gradient.
struct BatchGrad {
  double loss = 0.0;
  ModelParams grads;
};
BatchGrad batch_backward(const ModelParams& params, std::span<const Example> batch, const ModelConfig& config,
                         SeededRng* dropout_rng = nullptr);
double batch_loss(const ModelParams& params, std::span<const Example> batch, const ModelConfig& config);

/// Test hook: scales the analytic gradient of one named tensor before comparison.
struct GradCorruption {
  std::string parameter = "output_proj";
  double factor = 2.0;
};

GradCheckReport grad_check(const ModelParams& params, std::span<const Example> batch, const ModelConfig& config,
                           double h, std::size_t sample_size, SeededRng& rng,
                           const std::optional<GradCorruption>& corruption = std::nullopt);

// ---------------------------------------------------------------------------
// Synthetic tasks

enum class TaskKind { copy, reverse, mapped_translation, lm_only };

std::string to_string(TaskKind kind);
TaskKind parse_task_kind(const std::string& text);

struct TaskSpec {
  TaskKind kind = TaskKind::mapped_translation;
  int vocab_size = 64;
  int min_length = 2;   // content tokens, excluding BOS/EOS
  int max_length = 14;
  std::uint64_t mapping_seed = 17;
  /// Replace every source with a single PAD token (an unconditional LM view of the task).
  bool source_free = false;
  /// lm_only: probability that the next token repeats the token two back.
  double repeat_probability = 0.5;

  void validate() const;
};

/// Random bijection on the content tokens [3, vocab); special ids map to themselves.
std::vector<int> make_token_mapping(int vocab_size, std::uint64_t seed);

/// Second-order token process used by lm_only. With probability
/// repeat_probability the next token equals the token two back (when that is
/// a content token); otherwise it follows a sparse first-order table keyed by
/// the previous token. After BOS the first token is uniform over content.
class Order2Process {
 public:
  Order2Process(int vocab_size, std::uint64_t seed, double repeat_probability);

  double probability(int two_back, int previous, int next) const;
  int sample(int two_back, int previous, SeededRng& rng) const;
  /// Content tokens that may follow `previous` in the first-order table.
  const std::vector<int>& successors(int previous) const { return successors_[static_cast<std::size_t>(previous)]; }
  static constexpr std::size_t kSuccessors = 4;
  static constexpr double kSuccessorWeights[kSuccessors] = {0.4, 0.3, 0.2, 0.1};

 private:
  double first_order(int previous, int next) const;

  int vocab_size_;
  double repeat_probability_;
  std::vector<std::vector<int>> successors_;
};

/// Target for a content sequence: BOS, transformed content, EOS.
std::vector<int> make_target(TaskKind kind, const std::vector<int>& content, const std::vector<int>& mapping);

/// Sources carry the content followed by EOS (or a lone PAD for lm_only and
/// source_free specs).
std::vector<Example> gen_task(const TaskSpec& spec, SeededRng& rng, std::size_t count);

// ---------------------------------------------------------------------------
// Evaluation and training

struct EvalReport {
  double token_accuracy = 0.0;
  double sequence_exact_match = 0.0;
  double log_perplexity = 0.0;
  std::size_t sequences = 0;
  std::size_t predicted_tokens = 0;

  bool operator==(const EvalReport&) const = default;
};

/// Positional agreement of hypotheses with references, BOS excluded, EOS
/// included, PAD ignored. Fills token_accuracy, sequence_exact_match, sequences.
EvalReport score_decodes(std::span<const TokenSequence> references, std::span<const TokenSequence> hypotheses);

EvalReport evaluate(const ModelParams& params, const ModelConfig& config, std::span<const Example> data);

/// Machine-readable and tabular renderings.
std::string to_json(const EvalReport& report);
std::string to_table(const EvalReport& report);

struct TrainOptions {
  int steps = 3000;
  int batch_size = 32;
  double learning_rate = 1e-3;
  std::uint64_t seed = 1;
  int eval_interval = 250;
  int dev_size = 128;
};

struct TrainResult {
  ModelParams params;               // best dev checkpoint
  std::vector<double> loss_history;  // batch loss at each step, before the update
  int best_step = 0;                 // number of updates applied to the kept checkpoint
  EvalReport best_dev;
};

/// Dev data for a training run: derived from the run seed, disjoint stream
/// from the training batches.
std::vector<Example> dev_set(const TaskSpec& task, std::uint64_t seed, std::size_t count);

/// Checkpoints are compared on dev data every eval_interval steps and at the
/// end. Conditional tasks keep the highest token accuracy; lm_only and
/// source_free tasks keep the lowest log-perplexity.
TrainResult train(const ModelConfig& config, const TaskSpec& task, const TrainOptions& options,
                  const std::function<void(int step, double loss)>& on_step = {});

void write_loss_csv(std::ostream& out, std::span<const double> history);

}  // namespace ngram
