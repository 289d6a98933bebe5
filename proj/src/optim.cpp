#include "gcbm/optim.hpp"

#include <cmath>
#include <numbers>

namespace gcbm {

double cosine_lr(std::size_t t, std::size_t total, double lr0) {
  if (total == 0) throw ConfigError("cosine_lr: total steps must be positive");
  if (t > total) {
    throw ConfigError("cosine_lr: step " + std::to_string(t) + " exceeds schedule length " +
                      std::to_string(total));
  }
  const double frac = static_cast<double>(t) / static_cast<double>(total);
  return lr0 * 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
}

Adam::Adam(std::vector<Tensor> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
  if (cfg_.total_steps == 0) throw ConfigError("Adam: total_steps must be positive");
  if (!(cfg_.lr > 0.0)) throw ConfigError("Adam: lr must be positive");
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const auto& p : params_) {
    m_.emplace_back(p.rows(), p.cols());
    v_.emplace_back(p.rows(), p.cols());
  }
}

void Adam::step() {
  std::vector<Matrix> grads;
  grads.reserve(params_.size());
  for (const auto& p : params_) {
    grads.push_back(p.grad().empty() ? Matrix(p.rows(), p.cols()) : p.grad());
  }
  step(grads);
}

void Adam::step(std::span<const Matrix> grads) {
  if (grads.size() != params_.size()) {
    throw ShapeError("Adam::step: " + std::to_string(grads.size()) + " gradients for " +
                     std::to_string(params_.size()) + " parameters");
  }
  if (t_ >= cfg_.total_steps) {
    throw ConfigError("Adam::step: schedule of " + std::to_string(cfg_.total_steps) +
                      " steps exhausted");
  }
  for (std::size_t i = 0; i < grads.size(); ++i) {
    const Matrix& g = grads[i];
    if (g.rows() != m_[i].rows() || g.cols() != m_[i].cols()) {
      throw ShapeError("Adam::step: gradient " + shape_str(g) + " for parameter " +
                       shape_str(m_[i]));
    }
    if (!g.all_finite()) throw NumericError("Adam::step: non-finite gradient");
  }

  const double lr = cosine_lr(t_, cfg_.total_steps, cfg_.lr);
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto w = params_[i].mutable_value().data();
    auto m = m_[i].data();
    auto v = v_[i].data();
    auto g = grads[i].data();
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g[j];
      v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g[j] * g[j];
      const double m_hat = m[j] / bc1;
      const double v_hat = v[j] / bc2;
      w[j] -= lr * m_hat / (std::sqrt(v_hat) + cfg_.eps);
    }
  }
}

void Adam::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

}  // namespace gcbm
