#pragma once

// Oracles shared by the unit and acceptance suites.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "gcbm/tensor.hpp"

namespace gcbm::testing {

inline Matrix random_matrix(std::size_t r, std::size_t c, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Matrix m(r, c);
  for (double& x : m.data()) x = dist(rng);
  return m;
}

// Largest relative error between reverse-mode gradients of `loss` and
// central differences, over every entry of every parameter. The relative
// error uses max(|analytic|, |numeric|, floor) as denominator so that exact
// zeros compare by absolute error.
inline double max_gradient_error(const std::function<Tensor()>& loss, const std::vector<Tensor>& params,
                                 double h = 1e-6, double floor = 1e-3) {
  for (auto p : params) p.zero_grad();
  backward(loss());
  std::vector<Matrix> analytic;
  for (const auto& p : params) {
    analytic.push_back(p.grad().empty() ? Matrix(p.rows(), p.cols()) : p.grad());
  }
  double worst = 0.0;
  NoGradGuard guard;
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor p = params[i];
    for (std::size_t e = 0; e < p.value().size(); ++e) {
      double& x = p.mutable_value().data()[e];
      const double saved = x;
      x = saved + h;
      const double up = loss().item();
      x = saved - h;
      const double down = loss().item();
      x = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double a = analytic[i].data()[e];
      const double denom = std::max({std::abs(a), std::abs(numeric), floor});
      worst = std::max(worst, std::abs(a - numeric) / denom);
    }
  }
  return worst;
}

// Cyclic Jacobi eigenvalue iteration for a symmetric matrix.
inline std::vector<double> jacobi_eigenvalues(Matrix a, double tol = 1e-14, int max_sweeps = 100) {
  const std::size_t n = a.rows();
  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    double off = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        if (i != j) off += a(i, j) * a(i, j);
    if (off < tol * tol) break;
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        if (std::abs(a(p, q)) < 1e-300) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * a(p, q));
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a(k, p), akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a(p, k), aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
      }
    }
  }
  std::vector<double> ev(n);
  for (std::size_t i = 0; i < n; ++i) ev[i] = a(i, i);
  std::sort(ev.begin(), ev.end());
  return ev;
}

inline Matrix random_symmetric_nonnegative(std::size_t k, std::mt19937_64& rng, double sparsity = 0.5) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_real_distribution<double> w(0.0, 3.0);
  Matrix a(k, k);
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = i + 1; j < k; ++j)
      if (u(rng) > sparsity) a(i, j) = a(j, i) = w(rng);
  return a;
}

inline double max_abs_diff(const Matrix& a, const Matrix& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a.data()[i] - b.data()[i]));
  return worst;
}

// sum(op(x) .* R) for a fixed random R, so every output entry matters.
inline double unary_gradient_error(const std::function<Tensor(const Tensor&)>& op, Matrix x0, std::uint64_t seed = 1) {
  std::mt19937_64 rng(seed);
  Tensor x = Tensor::parameter(std::move(x0));
  Tensor probe = op(x);
  Tensor r = Tensor::constant(random_matrix(probe.rows(), probe.cols(), rng));
  return max_gradient_error([&] { return sum(hadamard(op(x), r)); }, {x});
}

inline double binary_gradient_error(const std::function<Tensor(const Tensor&, const Tensor&)>& op, Matrix a0,
                                    Matrix b0) {
  std::mt19937_64 rng(2);
  Tensor a = Tensor::parameter(std::move(a0));
  Tensor b = Tensor::parameter(std::move(b0));
  Tensor probe = op(a, b);
  Tensor r = Tensor::constant(random_matrix(probe.rows(), probe.cols(), rng));
  return max_gradient_error([&] { return sum(hadamard(op(a, b), r)); }, {a, b});
}

// Finite-difference error of every differentiable op, by name.
inline std::vector<std::pair<std::string, double>> op_gradient_errors(std::uint64_t seed = 11) {
  std::mt19937_64 rng(seed);
  auto m54 = [&] { return random_matrix(5, 4, rng); };
  using U = std::function<Tensor(const Tensor&)>;
  using B = std::function<Tensor(const Tensor&, const Tensor&)>;
  std::vector<std::pair<std::string, double>> out;
  auto unary = [&](const char* name, U op, Matrix x) { out.emplace_back(name, unary_gradient_error(op, std::move(x))); };
  auto binary = [&](const char* name, B op, Matrix a, Matrix b) {
    out.emplace_back(name, binary_gradient_error(op, std::move(a), std::move(b)));
  };
  binary("matmul", [](auto& a, auto& b) { return matmul(a, b); }, m54(), random_matrix(4, 3, rng));
  unary("transpose", [](auto& a) { return transpose(a); }, m54());
  binary("add", [](auto& a, auto& b) { return add(a, b); }, m54(), m54());
  binary("sub", [](auto& a, auto& b) { return sub(a, b); }, m54(), m54());
  binary("hadamard", [](auto& a, auto& b) { return hadamard(a, b); }, m54(), m54());
  binary("add_row", [](auto& a, auto& b) { return add_row(a, b); }, m54(), random_matrix(1, 4, rng));
  binary("mul_col", [](auto& a, auto& b) { return mul_col(a, b); }, m54(), random_matrix(5, 1, rng));
  unary("scale", [](auto& a) { return scale(a, -2.5); }, m54());
  unary("add_scalar", [](auto& a) { return add_scalar(a, 0.7); }, m54());
  unary("relu", [](auto& a) { return relu(a); }, m54());
  unary("tanh", [](auto& a) { return tanh(a); }, m54());
  unary("sigmoid", [](auto& a) { return sigmoid(a); }, m54());
  unary("exp", [](auto& a) { return exp(a); }, m54());
  unary("log", [](auto& a) { return log(a); }, random_matrix(5, 4, rng, 0.2, 2.0));
  unary("pow", [](auto& a) { return pow(a, 1.7); }, random_matrix(5, 4, rng, 0.2, 2.0));
  unary("pow_int", [](auto& a) { return pow(a, 3.0); }, m54());
  unary("sum", [](auto& a) { return sum(a); }, m54());
  unary("mean", [](auto& a) { return mean(a); }, m54());
  unary("row_sum", [](auto& a) { return row_sum(a); }, m54());
  unary("col_mean", [](auto& a) { return col_mean(a); }, m54());
  unary("diagonal", [](auto& a) { return diagonal(a); }, random_matrix(4, 4, rng));
  unary("l1_norm", [](auto& a) { return l1_norm(a); }, m54());
  unary("row_normalize", [](auto& a) { return row_normalize(a); }, m54());
  binary("cosine_similarity", [](auto& a, auto& b) { return cosine_similarity(a, b); }, m54(),
         random_matrix(3, 4, rng));
  unary("logsumexp_rows", [](auto& a) { return logsumexp_rows(a); }, m54());
  unary("logsumexp_rows_masked", [](auto& a) { return logsumexp_rows(a, true); }, random_matrix(4, 4, rng));
  unary("repeat_cols", [](auto& a) { return repeat_cols(a, 3); }, m54());
  unary("tile_cols", [](auto& a) { return tile_cols(a, 3); }, m54());
  unary("reshape", [](auto& a) { return reshape(a, 2, 10); }, m54());
  const std::vector<std::size_t> idx = {3, 0, 3};
  unary("gather_rows", [&](auto& a) { return gather_rows(a, idx); }, m54());

  const std::vector<int> labels = {0, 2, 1, 2, 0};
  Tensor logits = Tensor::parameter(random_matrix(5, 3, rng));
  out.emplace_back("softmax_cross_entropy",
                   max_gradient_error([&] { return softmax_cross_entropy(logits, labels); }, {logits}));
  Matrix targets(5, 4);
  for (std::size_t i = 0; i < targets.size(); ++i) targets.data()[i] = double(i % 3 == 0);
  Tensor z = Tensor::parameter(random_matrix(5, 4, rng, -3.0, 3.0));
  out.emplace_back("binary_cross_entropy_with_logits",
                   max_gradient_error([&] { return binary_cross_entropy_with_logits(z, targets); }, {z}));
  return out;
}

}  // namespace gcbm::testing
