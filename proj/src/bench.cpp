#include "ngram/bench.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <numeric>
#include <ostream>
#include <stdexcept>

#include "ngram/incremental.hpp"

namespace ngram {

namespace {

std::string num(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v, std::chars_format::fixed, 1);
  return std::string(buf, res.ptr);
}

std::string ratio(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v, std::chars_format::fixed, 4);
  return std::string(buf, res.ptr);
}

double mean(const std::vector<double>& xs) {
  return std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
}

double stddev(const std::vector<double>& xs) {
  if (xs.size() < 2) return 0.0;
  const double m = mean(xs);
  double s = 0.0;
  for (double x : xs) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(xs.size() - 1));
}

double median(std::vector<double> xs) {
  std::sort(xs.begin(), xs.end());
  const std::size_t n = xs.size();
  return n % 2 == 1 ? xs[n / 2] : 0.5 * (xs[n / 2 - 1] + xs[n / 2]);
}

struct PassTiming {
  std::vector<StepStats> steps;
  std::size_t cache_numbers = 0;
};

PassTiming decode_pass(const Tensor& memory, const std::vector<int>& tokens, const ModelParams& params,
                       const ModelConfig& config) {
  DecodeState state = start_decode(memory, params, config);
  PassTiming pass;
  pass.steps.resize(tokens.size());
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    incremental_step(state, tokens[i], params, config, &pass.steps[i]);
  }
  pass.cache_numbers = std::visit([](const auto& c) { return c.allocated_numbers(); }, state.caches.front());
  return pass;
}

}  // namespace

std::string to_string(CachePath path) { return path == CachePath::ring_buffer ? "ring_buffer" : "full_cache"; }

void BenchOptions::validate() const {
  if (repetitions < 10) throw std::invalid_argument("bench: repetitions must be at least 10");
  if (warmup < 0) throw std::invalid_argument("bench: warmup must be non-negative");
  if (lengths.empty() || orders.empty()) throw std::invalid_argument("bench: lengths and orders must be non-empty");
  for (int t : lengths) {
    if (t < 1) throw std::invalid_argument("bench: lengths must be positive");
    if (t > model.max_positions) {
      throw std::invalid_argument("bench: length " + std::to_string(t) + " exceeds max_positions " +
                                  std::to_string(model.max_positions));
    }
  }
  for (int n : orders) {
    if (n < 2) throw std::invalid_argument("bench: ngram orders must be >= 2");
  }
  if (source_length < 1) throw std::invalid_argument("bench: source_length must be positive");
  model.validate();
}

const BenchRow& BenchReport::row(int length, int order, CachePath path, std::size_t position) const {
  for (const auto& r : rows) {
    if (r.length == length && r.order == order && r.path == path && r.position == position) return r;
  }
  throw std::out_of_range("bench report has no such row");
}

const BenchSummary& BenchReport::summary(int length, int order, CachePath path) const {
  for (const auto& s : summaries) {
    if (s.length == length && s.order == order && s.path == path) return s;
  }
  throw std::out_of_range("bench report has no such summary");
}

BenchReport run_bench(const BenchOptions& options) {
  options.validate();
  const ModelParams params = [&] {
    ModelParams p = init_params(options.model, options.seed);
    // A zero output projection would make the logits trivial; fill it so the
    // whole step does representative work.
    SeededRng rng(options.seed + 1);
    p.output_proj = xavier_init(rng, static_cast<std::size_t>(options.model.d_model),
                                static_cast<std::size_t>(options.model.vocab_size));
    return p;
  }();
  SeededRng rng(options.seed + 2);
  const auto content = static_cast<std::uint64_t>(options.model.vocab_size - kFirstContentToken);
  std::vector<int> source_ids;
  for (int i = 0; i < options.source_length; ++i) source_ids.push_back(kFirstContentToken + static_cast<int>(rng.below(content)));
  const Tensor memory = encode(TokenSequence::source(source_ids), params, options.model);
  const int max_length = *std::max_element(options.lengths.begin(), options.lengths.end());
  std::vector<int> stream{kBos};
  while (static_cast<int>(stream.size()) < max_length) stream.push_back(kFirstContentToken + static_cast<int>(rng.below(content)));

  BenchReport report;
  for (int length : options.lengths) {
    const std::vector<int> tokens(stream.begin(), stream.begin() + length);
    for (int order : options.orders) {
      const CachePath paths[] = {CachePath::full_cache, CachePath::ring_buffer};
      ModelConfig configs[2] = {options.model, options.model};
      configs[0].mask = MaskSpec::causal();
      configs[1].mask = MaskSpec::ngram(order);

      for (int w = 0; w < options.warmup; ++w) {
        for (const auto& cfg : configs) decode_pass(memory, tokens, params, cfg);
      }
      // [path][position] -> samples
      std::vector<std::vector<std::vector<double>>> attn(2, std::vector<std::vector<double>>(tokens.size()));
      std::vector<std::vector<std::vector<double>>> step(2, std::vector<std::vector<double>>(tokens.size()));
      std::vector<StepStats> counts[2];
      std::size_t numbers[2] = {0, 0};
      for (int rep = 0; rep < options.repetitions; ++rep) {
        // Alternate which path runs first so slow drift hits both equally.
        for (int i = 0; i < 2; ++i) {
          const int p = (rep % 2 == 0) ? i : 1 - i;
          PassTiming pass = decode_pass(memory, tokens, params, configs[p]);
          for (std::size_t k = 0; k < tokens.size(); ++k) {
            attn[p][k].push_back(pass.steps[k].self_attention_ns);
            step[p][k].push_back(pass.steps[k].total_ns);
          }
          counts[p] = pass.steps;
          numbers[p] = pass.cache_numbers;
        }
      }
      BenchSummary summaries[2];
      for (int p = 0; p < 2; ++p) {
        std::vector<double> all_steps, all_attn;
        std::size_t peak = 0;
        for (std::size_t k = 0; k < tokens.size(); ++k) {
          BenchRow row;
          row.length = length;
          row.order = order;
          row.path = paths[p];
          row.position = k + 1;
          row.attended_keys = counts[p][k].attended_keys;
          row.cache_entries = counts[p][k].cache_entries;
          row.attention_mean_ns = mean(attn[p][k]);
          row.attention_median_ns = median(attn[p][k]);
          row.attention_stddev_ns = stddev(attn[p][k]);
          row.step_mean_ns = mean(step[p][k]);
          row.step_median_ns = median(step[p][k]);
          row.step_stddev_ns = stddev(step[p][k]);
          peak = std::max(peak, row.cache_entries);
          all_steps.insert(all_steps.end(), step[p][k].begin(), step[p][k].end());
          all_attn.insert(all_attn.end(), attn[p][k].begin(), attn[p][k].end());
          report.rows.push_back(row);
        }
        auto& s = summaries[p];
        s.length = length;
        s.order = order;
        s.path = paths[p];
        s.step_mean_ns = mean(all_steps);
        s.step_stddev_ns = stddev(all_steps);
        s.step_median_ns = median(all_steps);
        s.attention_mean_ns = mean(all_attn);
        s.peak_cache_entries = peak;
        s.cache_numbers = numbers[p];
      }
      for (auto& s : summaries) {
        s.attention_speedup = summaries[0].attention_mean_ns / s.attention_mean_ns;
        s.step_speedup = summaries[0].step_mean_ns / s.step_mean_ns;
        report.summaries.push_back(s);
      }
    }
  }
  return report;
}

void write_bench_rows_csv(std::ostream& out, const BenchReport& report, bool with_timing) {
  out << "length,order,path,position,attended_keys,cache_entries";
  if (with_timing) {
    out << ",attention_mean_ns,attention_median_ns,attention_stddev_ns,step_mean_ns,step_median_ns,step_stddev_ns";
  }
  out << "\r\n";
  for (const auto& r : report.rows) {
    out << r.length << ',' << r.order << ',' << to_string(r.path) << ',' << r.position << ',' << r.attended_keys << ','
        << r.cache_entries;
    if (with_timing) {
      out << ',' << num(r.attention_mean_ns) << ',' << num(r.attention_median_ns) << ',' << num(r.attention_stddev_ns)
          << ',' << num(r.step_mean_ns) << ',' << num(r.step_median_ns) << ',' << num(r.step_stddev_ns);
    }
    out << "\r\n";
  }
}

void write_bench_summary_csv(std::ostream& out, const BenchReport& report, bool with_timing) {
  out << "length,order,path,peak_cache_entries,cache_numbers";
  if (with_timing) {
    out << ",step_mean_ns,step_stddev_ns,step_median_ns,attention_mean_ns,attention_speedup,step_speedup";
  }
  out << "\r\n";
  for (const auto& s : report.summaries) {
    out << s.length << ',' << s.order << ',' << to_string(s.path) << ',' << s.peak_cache_entries << ','
        << s.cache_numbers;
    if (with_timing) {
      out << ',' << num(s.step_mean_ns) << ',' << num(s.step_stddev_ns) << ',' << num(s.step_median_ns) << ','
          << num(s.attention_mean_ns) << ',' << ratio(s.attention_speedup) << ',' << ratio(s.step_speedup);
    }
    out << "\r\n";
  }
}

}  // namespace ngram
