#include <algorithm>
#include <numeric>

#include "ngram/training.hpp"

namespace ngram {

std::string to_string(TaskKind kind) {
  switch (kind) {
    case TaskKind::copy: return "copy";
    case TaskKind::reverse: return "reverse";
    case TaskKind::mapped_translation: return "mapped_translation";
    case TaskKind::lm_only: return "lm_only";
  }
  return "unknown";
}

TaskKind parse_task_kind(const std::string& text) {
  if (text == "copy") return TaskKind::copy;
  if (text == "reverse") return TaskKind::reverse;
  if (text == "mapped_translation") return TaskKind::mapped_translation;
  if (text == "lm_only") return TaskKind::lm_only;
  throw std::invalid_argument("unknown task '" + text + "' (expected copy, reverse, mapped_translation or lm_only)");
}

void TaskSpec::validate() const {
  if (vocab_size <= kFirstContentToken + 1) throw std::invalid_argument("task vocab_size must leave at least 2 content tokens");
  if (min_length < 1 || max_length < min_length) {
    throw std::invalid_argument("task lengths must satisfy 1 <= min_length <= max_length");
  }
  if (!(repeat_probability >= 0.0 && repeat_probability <= 1.0)) {
    throw std::invalid_argument("repeat_probability must lie in [0, 1]");
  }
}

std::vector<int> make_token_mapping(int vocab_size, std::uint64_t seed) {
  std::vector<int> mapping(static_cast<std::size_t>(vocab_size));
  std::iota(mapping.begin(), mapping.end(), 0);
  SeededRng rng(seed);
  // Fisher-Yates over the content range only.
  for (int i = vocab_size - 1; i > kFirstContentToken; --i) {
    const int j = kFirstContentToken + static_cast<int>(rng.below(static_cast<std::uint64_t>(i - kFirstContentToken + 1)));
    std::swap(mapping[static_cast<std::size_t>(i)], mapping[static_cast<std::size_t>(j)]);
  }
  return mapping;
}

Order2Process::Order2Process(int vocab_size, std::uint64_t seed, double repeat_probability)
    : vocab_size_(vocab_size), repeat_probability_(repeat_probability), successors_(static_cast<std::size_t>(vocab_size)) {
  const int content = vocab_size - kFirstContentToken;
  if (content < static_cast<int>(kSuccessors)) throw std::invalid_argument("Order2Process: vocabulary too small");
  SeededRng rng(seed);
  for (int prev = kFirstContentToken; prev < vocab_size; ++prev) {
    auto& succ = successors_[static_cast<std::size_t>(prev)];
    while (succ.size() < kSuccessors) {
      const int c = kFirstContentToken + static_cast<int>(rng.below(static_cast<std::uint64_t>(content)));
      if (std::find(succ.begin(), succ.end(), c) == succ.end()) succ.push_back(c);
    }
  }
}

double Order2Process::first_order(int previous, int next) const {
  if (next < kFirstContentToken || next >= vocab_size_) return 0.0;
  if (previous < kFirstContentToken) return 1.0 / static_cast<double>(vocab_size_ - kFirstContentToken);
  const auto& succ = successors(previous);
  for (std::size_t i = 0; i < succ.size(); ++i) {
    if (succ[i] == next) return kSuccessorWeights[i];
  }
  return 0.0;
}

double Order2Process::probability(int two_back, int previous, int next) const {
  if (two_back < kFirstContentToken) return first_order(previous, next);
  const double repeat = next == two_back ? repeat_probability_ : 0.0;
  return repeat + (1.0 - repeat_probability_) * first_order(previous, next);
}

int Order2Process::sample(int two_back, int previous, SeededRng& rng) const {
  if (two_back >= kFirstContentToken && rng.uniform() < repeat_probability_) return two_back;
  if (previous < kFirstContentToken) {
    return kFirstContentToken + static_cast<int>(rng.below(static_cast<std::uint64_t>(vocab_size_ - kFirstContentToken)));
  }
  const double u = rng.uniform();
  double acc = 0.0;
  const auto& succ = successors(previous);
  for (std::size_t i = 0; i < succ.size(); ++i) {
    acc += kSuccessorWeights[i];
    if (u < acc) return succ[i];
  }
  return succ.back();
}

std::vector<int> make_target(TaskKind kind, const std::vector<int>& content, const std::vector<int>& mapping) {
  std::vector<int> target;
  target.reserve(content.size() + 2);
  target.push_back(kBos);
  switch (kind) {
    case TaskKind::reverse:
      target.insert(target.end(), content.rbegin(), content.rend());
      break;
    case TaskKind::mapped_translation:
      for (int id : content) target.push_back(mapping.at(static_cast<std::size_t>(id)));
      break;
    case TaskKind::copy:
    case TaskKind::lm_only:
      target.insert(target.end(), content.begin(), content.end());
      break;
  }
  target.push_back(kEos);
  return target;
}

std::vector<Example> gen_task(const TaskSpec& spec, SeededRng& rng, std::size_t count) {
  spec.validate();
  if (count < 1) throw std::invalid_argument("gen_task: count must be at least 1");
  const std::vector<int> mapping = make_token_mapping(spec.vocab_size, spec.mapping_seed);
  const Order2Process process(spec.vocab_size, spec.mapping_seed, spec.repeat_probability);
  const auto content_tokens = static_cast<std::uint64_t>(spec.vocab_size - kFirstContentToken);
  const auto span = static_cast<std::uint64_t>(spec.max_length - spec.min_length + 1);

  std::vector<Example> out;
  out.reserve(count);
  for (std::size_t n = 0; n < count; ++n) {
    const auto length = static_cast<std::size_t>(spec.min_length) + static_cast<std::size_t>(rng.below(span));
    std::vector<int> content;
    content.reserve(length);
    if (spec.kind == TaskKind::lm_only) {
      int two_back = kBos, previous = kBos;
      for (std::size_t i = 0; i < length; ++i) {
        const int next = process.sample(two_back, previous, rng);
        content.push_back(next);
        two_back = previous;
        previous = next;
      }
    } else {
      for (std::size_t i = 0; i < length; ++i) {
        content.push_back(kFirstContentToken + static_cast<int>(rng.below(content_tokens)));
      }
    }
    Example ex;
    ex.target = TokenSequence::target(make_target(spec.kind, content, mapping));
    if (spec.kind == TaskKind::lm_only || spec.source_free) {
      ex.source = TokenSequence::source({kPad});
    } else {
      content.push_back(kEos);
      ex.source = TokenSequence::source(std::move(content));
    }
    out.push_back(std::move(ex));
  }
  return out;
}

}  // namespace ngram
