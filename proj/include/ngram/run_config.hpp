#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "ngram/bench.hpp"
#include "ngram/model.hpp"
#include "ngram/training.hpp"

namespace ngram {

/// Flat `key = value` configuration shared by all subcommands. Every key has
/// a default; unknown keys are rejected with ConfigError.
class RunConfig {
 public:
  /// Default sets differ only in model size: `grad-check` uses a tiny model
  /// and `bench` a wider one with room for 512 positions.
  enum class Profile { standard, grad_check, bench };

  struct KeyDoc {
    std::string key;
    std::string default_value;
    std::string description;
  };

  static const std::vector<KeyDoc>& documented_keys();

  static RunConfig defaults(Profile profile = Profile::standard);
  /// Reads `key = value` lines; '#' starts a comment. Missing files raise ConfigError naming the path.
  static RunConfig load(const std::filesystem::path& path, Profile profile = Profile::standard);
  void merge_text(const std::string& text, const std::string& origin);

  void set(const std::string& key, const std::string& value);
  /// "key=value"
  void apply_override(const std::string& assignment);

  const std::string& get(const std::string& key) const;
  int get_int(const std::string& key) const;
  std::uint64_t get_u64(const std::string& key) const;
  double get_double(const std::string& key) const;
  bool get_bool(const std::string& key) const;
  std::vector<int> get_int_list(const std::string& key) const;

  ModelConfig model() const;
  TaskSpec task() const;
  TrainOptions train_options() const;
  BenchOptions bench_options() const;

  /// All keys in documented order, one `key = value` line each.
  std::string render() const;

 private:
  std::map<std::string, std::string> values_;
};

}  // namespace ngram
