#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "gcbm/tensor.hpp"

namespace gcbm {

// lr0 * 0.5 * (1 + cos(pi * t / total)). Throws when t > total or total == 0.
double cosine_lr(std::size_t t, std::size_t total, double lr0);

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  // Length of the cosine schedule; lr reaches 0 at this step.
  std::size_t total_steps = 1;
};

// Adam with bias correction, driven by a cosine learning-rate schedule.
class Adam {
 public:
  Adam(std::vector<Tensor> params, AdamConfig cfg);

  // Uses the gradients accumulated on the parameters; a parameter with no
  // gradient is treated as having a zero gradient.
  void step();
  // Explicit gradients, one per parameter, in construction order.
  void step(std::span<const Matrix> grads);
  void zero_grad();

  std::size_t step_count() const noexcept { return t_; }
  // Learning rate the next step will use.
  double current_lr() const { return cosine_lr(t_, cfg_.total_steps, cfg_.lr); }
  const AdamConfig& config() const noexcept { return cfg_; }

 private:
  std::vector<Tensor> params_;
  std::vector<Matrix> m_;
  std::vector<Matrix> v_;
  AdamConfig cfg_;
  std::size_t t_ = 0;
};

}  // namespace gcbm
