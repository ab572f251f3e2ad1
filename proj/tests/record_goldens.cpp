// Regenerates the golden files under tests/data/golden from pinned-seed runs.
//   record_goldens <golden-dir> [--desk]
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>

#include "ngram/bench.hpp"
#include "ngram/cli.hpp"
#include "ngram/run_config.hpp"
#include "pinned.hpp"

namespace fs = std::filesystem;
using namespace ngram;

namespace {

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
  std::cout << "wrote " << path.string() << '\n';
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

std::string format_tensor(const Tensor& t) {
  std::ostringstream os;
  char buf[40];
  for (std::size_t i = 0; i < t.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%.17g", t[i]);
    os << buf << (i + 1 == t.size() ? "\n" : " ");
  }
  return os.str();
}

int run(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  if (code != 0) {
    std::cerr << err.str();
    throw std::runtime_error("ngramt exited with " + std::to_string(code));
  }
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  if (argc < 2) {
    std::cerr << "usage: record_goldens <golden-dir> [--desk]\n";
    return 2;
  }
  const fs::path dir = argv[1];
  const bool desk = argc > 2 && std::string(argv[2]) == "--desk";
  fs::create_directories(dir);
  const fs::path work = fs::temp_directory_path() / "ngram_record_goldens";
  fs::remove_all(work);
  fs::create_directories(work);

  const auto cfg = pinned::tiny_config();
  const auto params = pinned::tiny_params();
  const auto batch = pinned::tiny_batch();
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", batch_loss(params, batch, cfg));
  write_file(dir / "model_values.txt", "encode\n" + format_tensor(encode(pinned::tiny_source(), params, cfg)) +
                                           "batch_loss\n" + buf + "\n");

  write_file(work / "smoke.conf", pinned::kSmokeTrainConfig);
  run({"train", "--config", (work / "smoke.conf").string(), "--out", (work / "smoke").string()});
  write_file(dir / "smoke_loss.csv", read_file(work / "smoke" / "loss.csv"));
  write_file(dir / "smoke_dev_eval.json", read_file(work / "smoke" / "dev_eval.json"));
  run({"eval", "--config", (work / "smoke.conf").string(), "--checkpoint",
       (work / "smoke" / "checkpoint.bin").string(), "--out", (work / "smoke_eval").string()});
  write_file(dir / "smoke_eval.json", read_file(work / "smoke_eval" / "eval.json"));

  RunConfig bench_cfg = RunConfig::defaults(RunConfig::Profile::bench);
  bench_cfg.merge_text(pinned::kSmallBenchConfig, "bench");
  const BenchReport report = run_bench(bench_cfg.bench_options());
  std::ostringstream rows, summary;
  write_bench_rows_csv(rows, report, false);
  write_bench_summary_csv(summary, report, false);
  write_file(dir / "bench_small_steps.csv", rows.str());
  write_file(dir / "bench_small_summary.csv", summary.str());

  if (desk) {
    run({"train", "--out", (work / "desk").string()});
    write_file(dir / "desk_loss.csv", read_file(work / "desk" / "loss.csv"));
  }
  fs::remove_all(work);
  return 0;
}
