#include "capseq/optim.hpp"

#include <cmath>

#include <spdlog/spdlog.h>

#include "capseq/error.hpp"

namespace capseq {

double global_grad_norm(const std::vector<ParamGroup>& groups) {
  double sq = 0.0;
  for (const auto& g : groups)
    for (const Parameter* p : g.params) {
      if (!p->trainable) continue;
      for (double v : p->grad.values()) sq += v * v;
    }
  return std::sqrt(sq);
}

StepReport Optimizer::step(const std::vector<ParamGroup>& groups) {
  StepReport report;
  for (const auto& g : groups) {
    if (!(g.lr > 0.0)) throw ValidationError("optimizer: learning rate must be positive");
  }
  report.grad_norm = global_grad_norm(groups);
  if (!std::isfinite(report.grad_norm)) {
    report.diagnostic = "non-finite gradient norm; update refused";
    spdlog::warn("optimizer step {}: {}", steps_ + 1, report.diagnostic);
    return report;
  }
  double factor = 1.0;
  if (config_.clip_norm && report.grad_norm > *config_.clip_norm) {
    factor = *config_.clip_norm / report.grad_norm;
    report.clipped = true;
  }
  ++steps_;
  const double t = static_cast<double>(steps_);
  const double bias1 = 1.0 - std::pow(config_.beta1, t);
  const double bias2 = 1.0 - std::pow(config_.beta2, t);
  for (const auto& g : groups) {
    for (Parameter* p : g.params) {
      if (!p->trainable) continue;
      if (report.clipped) {
        for (double& v : p->grad.values()) v *= factor;
      }
      auto& value = p->value;
      const auto& grad = p->grad;
      if (config_.method == OptimizerMethod::sgd) {
        for (std::size_t i = 0; i < value.size(); ++i) value[i] -= g.lr * grad[i];
        continue;
      }
      auto [it, fresh] = moments_.try_emplace(p->name);
      if (fresh || it->second.m.shape() != value.shape()) {
        it->second.m = Tensor(value.shape());
        it->second.v = Tensor(value.shape());
      }
      Tensor& m = it->second.m;
      Tensor& v = it->second.v;
      for (std::size_t i = 0; i < value.size(); ++i) {
        m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * grad[i];
        v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * grad[i] * grad[i];
        const double m_hat = m[i] / bias1;
        const double v_hat = v[i] / bias2;
        value[i] -= g.lr * m_hat / (std::sqrt(v_hat) + config_.adam_eps);
      }
    }
  }
  report.applied = true;
  return report;
}

void Optimizer::restore(std::size_t steps, std::unordered_map<std::string, Moments> moments) {
  steps_ = steps;
  moments_ = std::move(moments);
}

}  // namespace capseq
