#include "ngram/run_config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

namespace ngram {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

template <class T>
T parse_number(const std::string& key, const std::string& text) {
  T value{};
  auto res = std::from_chars(text.data(), text.data() + text.size(), value);
  if (res.ec != std::errc() || res.ptr != text.data() + text.size()) {
    throw ConfigError("config key '" + key + "': cannot parse '" + text + "'");
  }
  return value;
}

}  // namespace

const std::vector<RunConfig::KeyDoc>& RunConfig::documented_keys() {
  static const std::vector<KeyDoc> keys = {
      {"num_layers", "2", "encoder and decoder layers (L)"},
      {"num_heads", "2", "attention heads (H)"},
      {"d_model", "32", "model width"},
      {"d_ff", "64", "feed-forward hidden width"},
      {"vocab_size", "64", "vocabulary size including PAD=0, BOS=1, EOS=2"},
      {"mask", "causal", "decoder self-attention mask: causal or ngram"},
      {"ngram_order", "8", "N for the ngram mask (query sees itself and N-2 predecessors)"},
      {"dropout_rate", "0", "dropout on sublayer outputs during training"},
      {"layer_norm_eps", "1e-06", "layer norm epsilon"},
      {"max_positions", "64", "longest source or target sequence"},
      {"task", "mapped_translation", "copy, reverse, mapped_translation or lm_only"},
      {"min_length", "2", "shortest content length (tokens, excluding BOS/EOS)"},
      {"max_length", "14", "longest content length"},
      {"mapping_seed", "17", "seed of the token bijection and the lm_only transition table"},
      {"source_free", "false", "replace every source with a single PAD token"},
      {"repeat_probability", "0.5", "lm_only: chance the next token repeats the one two back"},
      {"steps", "3000", "optimizer steps"},
      {"batch_size", "32", "examples per step"},
      {"learning_rate", "0.001", "Adam learning rate"},
      {"eval_interval", "250", "steps between dev evaluations"},
      {"dev_size", "128", "dev examples used for checkpoint selection"},
      {"seed", "1", "run seed (initialization, data, dropout)"},
      {"eval_size", "256", "examples generated by the eval subcommand"},
      {"eval_seed", "4242", "seed of the eval subcommand's data"},
      {"grad_check_h", "1e-05", "central-difference step"},
      {"grad_check_samples", "200", "sampled scalar parameters"},
      {"grad_check_batch", "4", "examples in the grad-check batch"},
      {"grad_check_threshold", "1e-05", "largest accepted relative error"},
      {"bench_lengths", "16,512", "target lengths T to decode"},
      {"bench_orders", "8", "ngram orders N to compare against the full cache"},
      {"bench_repetitions", "20", "timed decode passes per (T, N, path); at least 10"},
      {"bench_warmup", "2", "untimed decode passes per (T, N, path)"},
      {"bench_source_length", "16", "source tokens encoded for the bench"},
  };
  return keys;
}

RunConfig RunConfig::defaults(Profile profile) {
  RunConfig c;
  for (const auto& k : documented_keys()) c.values_[k.key] = k.default_value;
  if (profile == Profile::grad_check) {
    c.values_["d_model"] = "8";
    c.values_["d_ff"] = "16";
    c.values_["vocab_size"] = "11";
    c.values_["task"] = "copy";
    c.values_["max_length"] = "5";
  } else if (profile == Profile::bench) {
    c.values_["num_heads"] = "4";
    c.values_["d_model"] = "128";
    c.values_["d_ff"] = "256";
    c.values_["max_positions"] = "512";
  }
  return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path, Profile profile) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file '" + path.string() + "'");
  std::stringstream buf;
  buf << in.rdbuf();
  RunConfig c = defaults(profile);
  c.merge_text(buf.str(), path.string());
  return c;
}

void RunConfig::merge_text(const std::string& text, const std::string& origin) {
  std::istringstream in(text);
  std::string line;
  int number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(origin + ":" + std::to_string(number) + ": expected 'key = value'");
    }
    try {
      set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError(origin + ":" + std::to_string(number) + ": " + e.what());
    }
  }
}

void RunConfig::set(const std::string& key, const std::string& value) {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
  it->second = value;
}

void RunConfig::apply_override(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("override '" + assignment + "' is not key=value");
  set(trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
}

const std::string& RunConfig::get(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
  return it->second;
}

int RunConfig::get_int(const std::string& key) const { return parse_number<int>(key, get(key)); }

std::uint64_t RunConfig::get_u64(const std::string& key) const { return parse_number<std::uint64_t>(key, get(key)); }

double RunConfig::get_double(const std::string& key) const { return parse_number<double>(key, get(key)); }

bool RunConfig::get_bool(const std::string& key) const {
  const auto& v = get(key);
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("config key '" + key + "': expected true or false, got '" + v + "'");
}

std::vector<int> RunConfig::get_int_list(const std::string& key) const {
  std::vector<int> out;
  std::istringstream in(get(key));
  std::string item;
  while (std::getline(in, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(parse_number<int>(key, item));
  }
  if (out.empty()) throw ConfigError("config key '" + key + "': empty list");
  return out;
}

ModelConfig RunConfig::model() const {
  std::map<std::string, std::string> kv;
  for (const char* k : {"num_layers", "num_heads", "d_model", "d_ff", "vocab_size", "mask", "ngram_order",
                        "dropout_rate", "layer_norm_eps", "max_positions"}) {
    kv[k] = get(k);
  }
  return ModelConfig::from_key_values(kv);
}

TaskSpec RunConfig::task() const {
  TaskSpec t;
  try {
    t.kind = parse_task_kind(get("task"));
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  t.vocab_size = get_int("vocab_size");
  t.min_length = get_int("min_length");
  t.max_length = get_int("max_length");
  t.mapping_seed = get_u64("mapping_seed");
  t.source_free = get_bool("source_free");
  t.repeat_probability = get_double("repeat_probability");
  try {
    t.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return t;
}

TrainOptions RunConfig::train_options() const {
  TrainOptions o;
  o.steps = get_int("steps");
  o.batch_size = get_int("batch_size");
  o.learning_rate = get_double("learning_rate");
  o.seed = get_u64("seed");
  o.eval_interval = get_int("eval_interval");
  o.dev_size = get_int("dev_size");
  if (o.steps < 1 || o.batch_size < 1 || o.eval_interval < 1 || o.dev_size < 1) {
    throw ConfigError("steps, batch_size, eval_interval and dev_size must be positive");
  }
  return o;
}

BenchOptions RunConfig::bench_options() const {
  BenchOptions b;
  b.lengths = get_int_list("bench_lengths");
  b.orders = get_int_list("bench_orders");
  b.repetitions = get_int("bench_repetitions");
  b.warmup = get_int("bench_warmup");
  b.source_length = get_int("bench_source_length");
  b.seed = get_u64("seed");
  b.model = model();
  try {
    b.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return b;
}

std::string RunConfig::render() const {
  std::ostringstream os;
  for (const auto& k : documented_keys()) os << k.key << " = " << values_.at(k.key) << '\n';
  return os.str();
}

}  // namespace ngram
