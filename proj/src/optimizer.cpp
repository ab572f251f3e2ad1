#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "ngram/training.hpp"

namespace ngram {

AdamState AdamState::for_params(const ModelParams& params, AdamOptions options) {
  AdamState state;
  state.options = options;
  params.for_each([&](const std::string&, const Tensor& t) {
    state.first_moment.emplace_back(t.shape());
    state.second_moment.emplace_back(t.shape());
  });
  return state;
}

void adam_step(std::span<Tensor* const> params, std::span<const Tensor* const> grads, AdamState& state) {
  if (params.size() != grads.size() || params.size() != state.first_moment.size()) {
    throw DimensionError("adam_step: " + std::to_string(params.size()) + " parameters, " +
                         std::to_string(grads.size()) + " gradients, " + std::to_string(state.first_moment.size()) +
                         " moment tensors");
  }
  const auto& o = state.options;
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double correction1 = 1.0 - std::pow(o.beta1, t);
  const double correction2 = 1.0 - std::pow(o.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    const Tensor& g = *grads[i];
    Tensor& m = state.first_moment[i];
    Tensor& v = state.second_moment[i];
    if (p.shape() != g.shape() || p.shape() != m.shape()) {
      throw DimensionError("adam_step: parameter " + shape_to_string(p.shape()) + " vs gradient " +
                           shape_to_string(g.shape()));
    }
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = o.beta1 * m[j] + (1.0 - o.beta1) * g[j];
      v[j] = o.beta2 * v[j] + (1.0 - o.beta2) * g[j] * g[j];
      const double m_hat = m[j] / correction1;
      const double v_hat = v[j] / correction2;
      p[j] -= o.learning_rate * m_hat / (std::sqrt(v_hat) + o.eps);
    }
  }
}

void adam_step(ModelParams& params, const ModelParams& grads, AdamState& state) {
  std::vector<Tensor*> p;
  std::vector<const Tensor*> g;
  params.for_each([&](const std::string&, Tensor& t) { p.push_back(&t); });
  grads.for_each([&](const std::string&, const Tensor& t) { g.push_back(&t); });
  adam_step(p, g, state);
}

double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-12});
  return std::abs(analytic - numeric) / denom;
}

GradCheckReport check_gradients(std::span<const GradSlot> slots, const std::function<double()>& loss, double h,
                                std::size_t sample_size, SeededRng& rng, double kink_tolerance) {
  if (!(h > 0.0)) throw std::invalid_argument("grad_check: step h must be positive");
  if (slots.empty()) throw std::invalid_argument("grad_check: no parameters");
  GradCheckReport report;
  const double center = loss();
  std::size_t draws = 0;
  while (report.samples < sample_size) {
    const std::size_t which = draws < slots.size() ? draws : static_cast<std::size_t>(rng.below(slots.size()));
    ++draws;
    const GradSlot& slot = slots[which];
    const auto index = static_cast<std::size_t>(rng.below(slot.value->size()));
    double& theta = (*slot.value)[index];
    const double saved = theta;
    theta = saved + h;
    const double plus = loss();
    theta = saved - h;
    const double minus = loss();
    theta = saved;
    if (std::abs((plus - center) - (center - minus)) / h > kink_tolerance) {
      if (++report.skipped_nonsmooth > sample_size) {
        throw std::runtime_error("grad_check: too many samples straddle a non-differentiable point");
      }
      continue;
    }
    const double numeric = (plus - minus) / (2.0 * h);
    const double analytic = (*slot.grad)[index];
    const double err = relative_error(analytic, numeric);
    if (report.samples == 0 || err > report.max_relative_error) {
      report.max_relative_error = err;
      report.worst_parameter = slot.name;
      report.worst_index = index;
      report.worst_analytic = analytic;
      report.worst_numeric = numeric;
    }
    ++report.samples;
  }
  return report;
}

BatchGrad batch_backward(const ModelParams& params, std::span<const Example> batch, const ModelConfig& config,
                         SeededRng* dropout_rng) {
  if (batch.empty()) throw std::invalid_argument("batch_backward: empty batch");
  BatchGrad out;
  out.grads = params.zeros_like();
  std::vector<Tensor*> acc;
  out.grads.for_each([&](const std::string&, Tensor& t) { acc.push_back(&t); });
  for (const auto& ex : batch) {
    LossAndGrad lg = model_backward(ex.source, ex.target, params, config, dropout_rng);
    out.loss += lg.loss;
    std::size_t i = 0;
    lg.grads.for_each([&](const std::string&, const Tensor& t) { add_inplace(*acc[i++], t); });
  }
  const double inv = 1.0 / static_cast<double>(batch.size());
  out.loss *= inv;
  for (Tensor* t : acc) scale_inplace(*t, inv);
  return out;
}

double batch_loss(const ModelParams& params, std::span<const Example> batch, const ModelConfig& config) {
  double total = 0.0;
  for (const auto& ex : batch) total += model_forward_loss(ex.source, ex.target, params, config).loss;
  return total / static_cast<double>(batch.size());
}

GradCheckReport grad_check(const ModelParams& params, std::span<const Example> batch, const ModelConfig& config,
                           double h, std::size_t sample_size, SeededRng& rng,
                           const std::optional<GradCorruption>& corruption) {
  if (!(h > 0.0)) throw std::invalid_argument("grad_check: step h must be positive");
  if (config.dropout_rate > 0.0) throw std::invalid_argument("grad_check: dropout must be disabled");
  ModelParams probe = params;
  BatchGrad analytic = batch_backward(probe, batch, config);
  if (corruption) {
    bool found = false;
    analytic.grads.for_each([&](const std::string& name, Tensor& t) {
      if (name == corruption->parameter) {
        scale_inplace(t, corruption->factor);
        found = true;
      }
    });
    if (!found) throw std::invalid_argument("grad_check: no parameter named '" + corruption->parameter + "'");
  }
  std::vector<GradSlot> slots;
  std::vector<const Tensor*> grads;
  analytic.grads.for_each([&](const std::string&, const Tensor& t) { grads.push_back(&t); });
  std::size_t i = 0;
  probe.for_each([&](const std::string& name, Tensor& t) { slots.push_back({name, &t, grads[i++]}); });
  return check_gradients(slots, [&] { return batch_loss(probe, batch, config); }, h, sample_size, rng);
}

}  // namespace ngram
