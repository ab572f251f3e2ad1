#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "ngram/model.hpp"

namespace ngram {

enum class CachePath { full_cache, ring_buffer };

std::string to_string(CachePath path);

struct BenchOptions {
  std::vector<int> lengths{16, 512};
  std::vector<int> orders{8};
  int repetitions = 20;
  /// Untimed decode passes per (T, N, path) before measuring.
  int warmup = 2;
  int source_length = 16;
  std::uint64_t seed = 1;
  /// Shared weights for both paths; the mask field is overridden per path.
  ModelConfig model{.num_layers = 2,
                    .num_heads = 4,
                    .d_model = 128,
                    .d_ff = 256,
                    .vocab_size = 64,
                    .mask = MaskSpec::causal(),
                    .dropout_rate = 0.0,
                    .layer_norm_eps = 1e-6,
                    .max_positions = 512};

  void validate() const;
};

/// Timing at one decode position, aggregated over repetitions.
struct BenchRow {
  int length = 0;
  int order = 0;
  CachePath path = CachePath::full_cache;
  std::size_t position = 0;
  std::size_t attended_keys = 0;
  std::size_t cache_entries = 0;
  double attention_mean_ns = 0.0;
  double attention_median_ns = 0.0;
  double attention_stddev_ns = 0.0;
  double step_mean_ns = 0.0;
  double step_median_ns = 0.0;
  double step_stddev_ns = 0.0;
};

struct BenchSummary {
  int length = 0;
  int order = 0;
  CachePath path = CachePath::full_cache;
  double step_mean_ns = 0.0;    // mean over positions and repetitions
  double step_stddev_ns = 0.0;
  double step_median_ns = 0.0;
  double attention_mean_ns = 0.0;
  std::size_t peak_cache_entries = 0;
  std::size_t cache_numbers = 0;          // doubles held by one layer's key+value store at the end
  double attention_speedup = 1.0;         // full_cache attention time / this path's
  double step_speedup = 1.0;
};

struct BenchReport {
  std::vector<BenchRow> rows;
  std::vector<BenchSummary> summaries;

  const BenchRow& row(int length, int order, CachePath path, std::size_t position) const;
  const BenchSummary& summary(int length, int order, CachePath path) const;
};

/// Teacher-forced incremental decoding of a fixed random target stream of
/// length T through both cache paths on identical weights and inputs.
BenchReport run_bench(const BenchOptions& options);

/// Per-position CSV. Timing columns are the trailing six; `with_timing`
/// false drops them for byte-stable comparisons.
void write_bench_rows_csv(std::ostream& out, const BenchReport& report, bool with_timing = true);
void write_bench_summary_csv(std::ostream& out, const BenchReport& report, bool with_timing = true);

}  // namespace ngram
