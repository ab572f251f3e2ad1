#include "ngram/cli.hpp"

#include <CLI11.hpp>

#include <charconv>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <ostream>
#include <sstream>

#include "ngram/bench.hpp"
#include "ngram/incremental.hpp"
#include "ngram/run_config.hpp"
#include "ngram/training.hpp"

namespace ngram {

namespace {

namespace fs = std::filesystem;

struct CommonFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = "out";
  std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, CommonFlags& flags) {
  cmd->add_option("--config", flags.config, "key = value configuration file");
  cmd->add_option("--seed", flags.seed, "run seed (overrides the config's seed)");
  cmd->add_option("--out", flags.out, "output directory")->capture_default_str();
  cmd->add_option("--set", flags.overrides, "key=value override, repeatable");
}

RunConfig resolve_config(const CommonFlags& flags, RunConfig::Profile profile) {
  RunConfig cfg = flags.config.empty() ? RunConfig::defaults(profile) : RunConfig::load(flags.config, profile);
  for (const auto& o : flags.overrides) cfg.apply_override(o);
  if (flags.seed) cfg.set("seed", std::to_string(*flags.seed));
  return cfg;
}

// Every output file is staged next to its destination and renamed into place
// only after the whole command has succeeded.
class OutputSet {
 public:
  explicit OutputSet(fs::path dir) : dir_(std::move(dir)) {}

  void add(const std::string& name, std::string contents) { files_.emplace_back(name, std::move(contents)); }

  void commit() {
    fs::create_directories(dir_);
    std::vector<std::pair<fs::path, fs::path>> staged;
    for (const auto& [name, contents] : files_) {
      const fs::path final_path = dir_ / name;
      const fs::path tmp = dir_ / (name + ".tmp");
      std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
      out << contents;
      out.close();
      if (!out) throw std::runtime_error("failed writing " + tmp.string());
      staged.emplace_back(tmp, final_path);
    }
    for (const auto& [tmp, final_path] : staged) fs::rename(tmp, final_path);
  }

  const fs::path& dir() const { return dir_; }

 private:
  fs::path dir_;
  std::vector<std::pair<std::string, std::string>> files_;
};

std::vector<int> parse_token_list(const std::string& text) {
  std::vector<int> ids;
  std::string normalized = text;
  for (char& c : normalized) {
    if (c == ',') c = ' ';
  }
  std::istringstream in(normalized);
  std::string item;
  while (in >> item) {
    int value = 0;
    auto res = std::from_chars(item.data(), item.data() + item.size(), value);
    if (res.ec != std::errc() || res.ptr != item.data() + item.size()) {
      throw InputError("'" + item + "' is not a token id");
    }
    ids.push_back(value);
  }
  if (ids.empty()) throw InputError("no source tokens given");
  return ids;
}

std::string join(const std::vector<int>& ids) {
  std::ostringstream os;
  for (std::size_t i = 0; i < ids.size(); ++i) os << (i ? " " : "") << ids[i];
  return os.str();
}

std::string checkpoint_bytes(const ModelConfig& config, const ModelParams& params) {
  std::ostringstream os(std::ios::binary);
  write_checkpoint(os, config, params);
  return os.str();
}

int cmd_train(const CommonFlags& flags, std::ostream& out) {
  const RunConfig cfg = resolve_config(flags, RunConfig::Profile::standard);
  const ModelConfig model = cfg.model();
  const TaskSpec task = cfg.task();
  const TrainOptions options = cfg.train_options();
  if (task.vocab_size != model.vocab_size) {
    throw ConfigError("task vocab_size differs from model vocab_size");
  }
  out << "training " << to_string(task.kind) << " with " << model.mask.describe() << " decoder mask, "
      << options.steps << " steps\n";
  const TrainResult result = train(model, task, options, [&](int step, double loss) {
    if (step % 500 == 0) out << "step " << step << " loss " << loss << '\n';
  });

  OutputSet files{fs::path(flags.out)};
  files.add("checkpoint.bin", checkpoint_bytes(model, result.params));
  std::ostringstream loss_csv;
  write_loss_csv(loss_csv, result.loss_history);
  files.add("loss.csv", loss_csv.str());
  files.add("dev_eval.json", to_json(result.best_dev) + "\n");
  files.add("config.txt", cfg.render());
  files.commit();
  out << "best checkpoint after " << result.best_step << " updates\n" << to_table(result.best_dev);
  out << "wrote " << (files.dir() / "checkpoint.bin").string() << '\n';
  return kExitOk;
}

int cmd_eval(const CommonFlags& flags, const std::string& checkpoint_path, std::ostream& out) {
  const RunConfig cfg = resolve_config(flags, RunConfig::Profile::standard);
  const Checkpoint ckpt = load_checkpoint(checkpoint_path);
  const TaskSpec task = cfg.task();
  if (task.vocab_size != ckpt.config.vocab_size) {
    throw ConfigError("vocabulary mismatch: task vocab_size " + std::to_string(task.vocab_size) +
                      " vs checkpoint vocab_size " + std::to_string(ckpt.config.vocab_size));
  }
  SeededRng rng(cfg.get_u64("eval_seed"));
  const auto data = gen_task(task, rng, static_cast<std::size_t>(cfg.get_int("eval_size")));
  const EvalReport report = evaluate(ckpt.params, ckpt.config, data);
  const std::string json = to_json(report) + "\n";
  OutputSet files{fs::path(flags.out)};
  files.add("eval.json", json);
  files.commit();
  out << json << to_table(report);
  return kExitOk;
}

int cmd_decode(const CommonFlags& flags, const std::string& checkpoint_path, const std::string& source_text,
               int max_len, std::ostream& out) {
  const RunConfig cfg = resolve_config(flags, RunConfig::Profile::standard);
  const Checkpoint ckpt = load_checkpoint(checkpoint_path);
  std::vector<int> content = parse_token_list(source_text);
  std::vector<int> source = content;
  if (source.back() != kEos) {
    source.push_back(kEos);
  } else {
    content.pop_back();
  }
  const TokenSequence src = TokenSequence::source(source);
  check_ids(src, ckpt.config.vocab_size);
  const std::size_t limit = max_len > 0 ? static_cast<std::size_t>(max_len)
                                        : static_cast<std::size_t>(ckpt.config.max_positions);
  const TokenSequence decoded = greedy_decode(src, ckpt.params, ckpt.config, limit);
  out << "output: " << join(decoded.ids) << '\n';
  if (!flags.config.empty()) {
    const TaskSpec task = cfg.task();
    if (task.kind != TaskKind::lm_only && task.vocab_size == ckpt.config.vocab_size) {
      const auto mapping = make_token_mapping(task.vocab_size, task.mapping_seed);
      out << "expected: " << join(make_target(task.kind, content, mapping)) << '\n';
    }
  }
  return kExitOk;
}

int cmd_grad_check(const CommonFlags& flags, const std::optional<std::string>& corrupt, std::ostream& out) {
  const RunConfig cfg = resolve_config(flags, RunConfig::Profile::grad_check);
  const ModelConfig model = cfg.model();
  const TaskSpec task = cfg.task();
  const double h = cfg.get_double("grad_check_h");
  if (!(h > 0.0)) throw ConfigError("grad_check_h must be positive, got " + cfg.get("grad_check_h"));
  const double threshold = cfg.get_double("grad_check_threshold");
  const auto seed = cfg.get_u64("seed");

  ModelParams params = init_params(model, seed);
  // The default zero output projection would zero every other gradient.
  SeededRng init_rng(seed + 1);
  params.output_proj = xavier_init(init_rng, static_cast<std::size_t>(model.d_model),
                                   static_cast<std::size_t>(model.vocab_size));
  SeededRng data_rng(seed + 2);
  const auto batch = gen_task(task, data_rng, static_cast<std::size_t>(cfg.get_int("grad_check_batch")));
  SeededRng sample_rng(seed + 3);
  std::optional<GradCorruption> corruption;
  if (corrupt) corruption = GradCorruption{corrupt->empty() ? "output_proj" : *corrupt, 2.0};

  const GradCheckReport report =
      grad_check(params, batch, model, h, static_cast<std::size_t>(cfg.get_int("grad_check_samples")), sample_rng,
                 corruption);
  const bool pass = report.max_relative_error < threshold;
  out << std::setprecision(6) << "samples: " << report.samples << '\n'
      << "max_relative_error: " << report.max_relative_error << '\n'
      << "worst_parameter: " << report.worst_parameter << '[' << report.worst_index << "]\n"
      << "analytic: " << report.worst_analytic << " numeric: " << report.worst_numeric << '\n'
      << "skipped_nonsmooth: " << report.skipped_nonsmooth << '\n'
      << (pass ? "PASS" : "FAIL") << " (threshold " << threshold << ")\n";
  if (!pass) out << "offending parameter: " << report.worst_parameter << '\n';
  return pass ? kExitOk : kExitCheckFailed;
}

int cmd_bench(const CommonFlags& flags, std::ostream& out) {
  const RunConfig cfg = resolve_config(flags, RunConfig::Profile::bench);
  const BenchOptions options = cfg.bench_options();
  const BenchReport report = run_bench(options);
  std::ostringstream rows, summary;
  write_bench_rows_csv(rows, report);
  write_bench_summary_csv(summary, report);
  OutputSet files{fs::path(flags.out)};
  files.add("bench_steps.csv", rows.str());
  files.add("bench_summary.csv", summary.str());
  files.commit();
  out << summary.str();
  out << "wrote " << (files.dir() / "bench_steps.csv").string() << '\n';
  return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"N-gram masked decoder self-attention: train, eval, decode, grad-check, bench", "ngramt"};
  app.require_subcommand(1);

  CommonFlags flags;
  std::string checkpoint;
  std::string source;
  int max_len = 0;
  std::optional<std::string> corrupt;

  auto* train_cmd = app.add_subcommand("train", "train a model and write checkpoint.bin and loss.csv");
  add_common(train_cmd, flags);

  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on generated task data");
  add_common(eval_cmd, flags);
  eval_cmd->add_option("--checkpoint", checkpoint, "checkpoint file")->required();

  auto* decode_cmd = app.add_subcommand("decode", "greedy-decode one source sequence");
  add_common(decode_cmd, flags);
  decode_cmd->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  decode_cmd->add_option("--source", source, "source token ids, space or comma separated")->required();
  decode_cmd->add_option("--max-len", max_len, "longest output including BOS (default max_positions)");

  auto* grad_cmd = app.add_subcommand("grad-check", "compare analytic and finite-difference gradients");
  add_common(grad_cmd, flags);
  grad_cmd->add_option("--corrupt-gradient", corrupt,
                       "test hook: double the analytic gradient of the named tensor (default output_proj)")
      ->expected(0, 1);

  auto* bench_cmd = app.add_subcommand("bench", "time incremental decoding with full and ring-buffer caches");
  add_common(bench_cmd, flags);

  std::vector<std::string> argv_storage{"ngramt"};
  argv_storage.insert(argv_storage.end(), args.begin(), args.end());
  std::vector<const char*> argv;
  for (const auto& a : argv_storage) argv.push_back(a.c_str());

  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitBadInput;
  }

  try {
    if (*train_cmd) return cmd_train(flags, out);
    if (*eval_cmd) return cmd_eval(flags, checkpoint, out);
    if (*decode_cmd) return cmd_decode(flags, checkpoint, source, max_len, out);
    if (*grad_cmd) return cmd_grad_check(flags, corrupt, out);
    if (*bench_cmd) return cmd_bench(flags, out);
  } catch (const TrainingError& e) {
    err << "error: " << e.what() << '\n';
    return kExitDiverged;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitBadInput;
  }
  return kExitBadInput;
}

}  // namespace ngram
