#include <charconv>
#include <cmath>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "ngram/incremental.hpp"
#include "ngram/training.hpp"

namespace ngram {

namespace {

bool all_finite(const ModelParams& params) {
  bool finite = true;
  params.for_each([&](const std::string&, const Tensor& t) {
    for (double v : t.data()) finite = finite && std::isfinite(v);
  });
  return finite;
}

std::string shortest(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

std::vector<int> strip_pad(const std::vector<int>& ids) {
  std::vector<int> out;
  for (int id : ids) {
    if (id != kPad) out.push_back(id);
  }
  return out;
}

bool prefers_perplexity(const TaskSpec& task) { return task.kind == TaskKind::lm_only || task.source_free; }

bool better(const EvalReport& candidate, const EvalReport& best, bool by_perplexity) {
  if (by_perplexity) return candidate.log_perplexity < best.log_perplexity;
  if (candidate.token_accuracy != best.token_accuracy) return candidate.token_accuracy > best.token_accuracy;
  return candidate.log_perplexity < best.log_perplexity;
}

}  // namespace

EvalReport score_decodes(std::span<const TokenSequence> references, std::span<const TokenSequence> hypotheses) {
  if (references.size() != hypotheses.size()) {
    throw std::invalid_argument("score_decodes: " + std::to_string(references.size()) + " references vs " +
                                std::to_string(hypotheses.size()) + " hypotheses");
  }
  EvalReport r;
  std::size_t correct = 0, total = 0, exact = 0;
  for (std::size_t i = 0; i < references.size(); ++i) {
    const auto ref = strip_pad(references[i].ids);
    const auto hyp = strip_pad(hypotheses[i].ids);
    for (std::size_t k = 1; k < ref.size(); ++k) {
      ++total;
      if (k < hyp.size() && hyp[k] == ref[k]) ++correct;
    }
    if (ref == hyp) ++exact;
  }
  r.sequences = references.size();
  r.token_accuracy = total == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(total);
  r.sequence_exact_match = references.empty() ? 0.0 : static_cast<double>(exact) / static_cast<double>(references.size());
  return r;
}

EvalReport evaluate(const ModelParams& params, const ModelConfig& config, std::span<const Example> data) {
  if (data.empty()) throw std::invalid_argument("evaluate: no data");
  std::vector<TokenSequence> refs, hyps;
  double nll = 0.0;
  std::size_t tokens = 0;
  for (const auto& ex : data) {
    LossResult lr = model_forward_loss(ex.source, ex.target, params, config);
    nll += lr.total_nll;
    tokens += lr.predicted;
    refs.push_back(ex.target);
    // One step past the reference is enough to settle exact match.
    hyps.push_back(greedy_decode(ex.source, params, config, ex.target.size() + 1));
  }
  EvalReport report = score_decodes(refs, hyps);
  report.log_perplexity = nll / static_cast<double>(tokens);
  report.predicted_tokens = tokens;
  return report;
}

std::string to_json(const EvalReport& report) {
  nlohmann::ordered_json j;
  j["token_accuracy"] = report.token_accuracy;
  j["sequence_exact_match"] = report.sequence_exact_match;
  j["log_perplexity"] = report.log_perplexity;
  j["sequences"] = report.sequences;
  j["predicted_tokens"] = report.predicted_tokens;
  return j.dump(2);
}

std::string to_table(const EvalReport& report) {
  std::ostringstream os;
  os << std::left << std::setw(22) << "metric" << "value\n";
  os << std::setw(22) << "token_accuracy" << std::fixed << std::setprecision(4) << report.token_accuracy << '\n';
  os << std::setw(22) << "sequence_exact_match" << report.sequence_exact_match << '\n';
  os << std::setw(22) << "log_perplexity" << report.log_perplexity << '\n';
  os << std::setw(22) << "sequences" << report.sequences << '\n';
  os << std::setw(22) << "predicted_tokens" << report.predicted_tokens << '\n';
  return os.str();
}

std::vector<Example> dev_set(const TaskSpec& task, std::uint64_t seed, std::size_t count) {
  SeededRng rng(seed ^ 0x9e3779b97f4a7c15ULL);
  return gen_task(task, rng, count);
}

TrainResult train(const ModelConfig& config, const TaskSpec& task, const TrainOptions& options,
                  const std::function<void(int, double)>& on_step) {
  config.validate();
  task.validate();
  if (options.steps < 1) throw std::invalid_argument("train: steps must be at least 1");
  if (options.eval_interval < 1) throw std::invalid_argument("train: eval_interval must be at least 1");
  if (options.dev_size < 1) throw std::invalid_argument("train: dev_size must be at least 1");
  if (options.batch_size < 1) throw std::invalid_argument("train: batch_size must be at least 1");
  if (task.vocab_size != config.vocab_size) {
    throw std::invalid_argument("train: task vocab_size " + std::to_string(task.vocab_size) +
                                " differs from model vocab_size " + std::to_string(config.vocab_size));
  }
  SeededRng master(options.seed);
  const std::uint64_t init_seed = master.next_u64();
  SeededRng data_rng = master.split();
  SeededRng dropout_rng = master.split();

  ModelParams params = init_params(config, init_seed);
  AdamState adam = AdamState::for_params(params, {options.learning_rate});
  const std::vector<Example> dev = dev_set(task, options.seed, static_cast<std::size_t>(options.dev_size));
  const bool by_ppl = prefers_perplexity(task);

  TrainResult result;
  result.params = params;
  result.best_dev = evaluate(params, config, dev);
  result.best_step = 0;
  result.loss_history.reserve(static_cast<std::size_t>(options.steps));

  for (int step = 0; step < options.steps; ++step) {
    const auto batch = gen_task(task, data_rng, static_cast<std::size_t>(options.batch_size));
    BatchGrad bg;
    try {
      bg = batch_backward(params, batch, config, config.dropout_rate > 0.0 ? &dropout_rng : nullptr);
    } catch (const std::domain_error& e) {
      throw TrainingError("training diverged at step " + std::to_string(step) + ": " + e.what());
    }
    if (!std::isfinite(bg.loss)) {
      throw TrainingError("training diverged at step " + std::to_string(step) + ": loss is " + shortest(bg.loss));
    }
    result.loss_history.push_back(bg.loss);
    if (on_step) on_step(step, bg.loss);
    adam_step(params, bg.grads, adam);
    if (!all_finite(params)) {
      throw TrainingError("training diverged at step " + std::to_string(step) + ": non-finite parameters");
    }

    const int updates = step + 1;
    if (updates % options.eval_interval == 0 || updates == options.steps) {
      EvalReport report = evaluate(params, config, dev);
      if (better(report, result.best_dev, by_ppl)) {
        result.best_dev = report;
        result.best_step = updates;
        result.params = params;
      }
    }
  }
  return result;
}

void write_loss_csv(std::ostream& out, std::span<const double> history) {
  out << "step,loss\r\n";
  for (std::size_t i = 0; i < history.size(); ++i) out << i << ',' << shortest(history[i]) << "\r\n";
}

}  // namespace ngram
