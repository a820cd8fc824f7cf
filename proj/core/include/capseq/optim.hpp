#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "capseq/autodiff.hpp"

namespace capseq {

enum class OptimizerMethod { sgd, adam };

struct OptimizerConfig {
  OptimizerMethod method = OptimizerMethod::adam;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::optional<double> clip_norm;
};

// Parameters sharing one learning rate.
struct ParamGroup {
  std::vector<Parameter*> params;
  double lr = 1e-3;
};

struct StepReport {
  bool applied = false;
  bool clipped = false;
  double grad_norm = 0.0;  // global L2 norm before clipping
  std::string diagnostic;
};

double global_grad_norm(const std::vector<ParamGroup>& groups);

// Gradient-norm clipping followed by an SGD or Adam update. The clip norm
// is computed over every trainable parameter in every group. Frozen
// parameters are never touched.
class Optimizer {
 public:
  explicit Optimizer(OptimizerConfig config) : config_(config) {}

  StepReport step(const std::vector<ParamGroup>& groups);

  const OptimizerConfig& config() const noexcept { return config_; }
  std::size_t step_count() const noexcept { return steps_; }

  // Adam moments, exposed for checkpointing and resume.
  struct Moments {
    Tensor m;
    Tensor v;
  };
  const std::unordered_map<std::string, Moments>& moments() const noexcept { return moments_; }
  void restore(std::size_t steps, std::unordered_map<std::string, Moments> moments);

 private:
  OptimizerConfig config_;
  std::size_t steps_ = 0;
  std::unordered_map<std::string, Moments> moments_;
};

}  // namespace capseq
