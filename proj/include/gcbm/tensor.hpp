#pragma once

// Dense row-major matrices of doubles and a small reverse-mode autodiff
// engine over them. Every model in this project is expressed with the ops
// declared here; the graph of a forward pass is rebuilt on every call.

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "gcbm/error.hpp"

namespace gcbm {

class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

  static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows);
  static Matrix identity(std::size_t n);
  static Matrix column(std::span<const double> values);
  static Matrix row_vector(std::span<const double> values);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  Matrix transposed() const;
  bool all_finite() const noexcept;
  void fill(double v);

  friend bool operator==(const Matrix& a, const Matrix& b) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

// Plain (non-differentiable) helpers shared by the engine, the oracles in the
// tests, and inference-side code.
Matrix matmul(const Matrix& a, const Matrix& b);
std::string shape_str(const Matrix& m);

namespace detail {
struct Node;
}

// Handle to a node of the autodiff graph. Copies share the node.
class Tensor {
 public:
  Tensor() = default;

  static Tensor constant(Matrix value);
  // A leaf that accumulates gradient.
  static Tensor parameter(Matrix value);

  bool defined() const noexcept { return node_ != nullptr; }
  const Matrix& value() const;
  // Only valid on leaves; used by optimizers and checkpoint loading.
  Matrix& mutable_value();
  // Empty matrix when no gradient has reached this node.
  const Matrix& grad() const;
  bool requires_grad() const;
  void zero_grad();

  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  double item() const;

  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  const std::shared_ptr<detail::Node>& node() const noexcept { return node_; }

 private:
  std::shared_ptr<detail::Node> node_;
};

// Backpropagates from a 1x1 tensor into every reachable leaf parameter,
// accumulating into existing leaf gradients.
void backward(const Tensor& loss);

// Disables graph construction on this thread while alive. Ops then produce
// constants, which keeps inference allocation-light.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled() noexcept;

// ---- differentiable ops ----------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor hadamard(const Tensor& a, const Tensor& b);
// a (r x c) plus a 1 x c row broadcast down every row.
Tensor add_row(const Tensor& a, const Tensor& row);
// a (r x c) times an r x 1 column broadcast across every column.
Tensor mul_col(const Tensor& a, const Tensor& col);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);
Tensor relu(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor pow(const Tensor& a, double exponent);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor row_sum(const Tensor& a);
Tensor col_mean(const Tensor& a);
Tensor diagonal(const Tensor& a);
Tensor l1_norm(const Tensor& a);
// Each row scaled to unit L2 norm; zero rows are a NumericError.
Tensor row_normalize(const Tensor& a);
// S_ij = cos(a_i, b_j).
Tensor cosine_similarity(const Tensor& a, const Tensor& b);
// r x 1 log-sum-exp of each row; exclude_diagonal drops entry (i, i).
Tensor logsumexp_rows(const Tensor& a, bool exclude_diagonal = false);
// Mean over rows of -log softmax(logits)_label.
Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> labels);
// Mean over all entries of BCE(sigmoid(logits), targets), computed stably.
Tensor binary_cross_entropy_with_logits(const Tensor& logits, const Matrix& targets);
// r x c -> r x (c * times); output column j * times + t copies input column j.
Tensor repeat_cols(const Tensor& a, std::size_t times);
// r x c -> r x (c * times); output column t * c + j copies input column j.
Tensor tile_cols(const Tensor& a, std::size_t times);
// Reinterprets the row-major buffer with a new shape.
Tensor reshape(const Tensor& a, std::size_t rows, std::size_t cols);
// Rows `indices` of a, in order.
Tensor gather_rows(const Tensor& a, std::span<const std::size_t> indices);

}  // namespace gcbm
