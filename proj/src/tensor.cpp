#include "gcbm/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <unordered_map>

namespace gcbm {

// ---- Matrix ----------------------------------------------------------------

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows_ * cols_) {
    throw ShapeError("matrix data length " + std::to_string(data_.size()) + " does not match " +
                     std::to_string(rows_) + "x" + std::to_string(cols_));
  }
}

Matrix Matrix::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r == 0 ? 0 : rows.begin()->size();
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw ShapeError("ragged rows in Matrix::from_rows");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Matrix(r, c, std::move(data));
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

Matrix Matrix::column(std::span<const double> values) {
  return Matrix(values.size(), 1, std::vector<double>(values.begin(), values.end()));
}

Matrix Matrix::row_vector(std::span<const double> values) {
  return Matrix(1, values.size(), std::vector<double>(values.begin(), values.end()));
}

Matrix Matrix::transposed() const {
  Matrix t(cols_, rows_);
  for (std::size_t i = 0; i < rows_; ++i)
    for (std::size_t j = 0; j < cols_; ++j) t(j, i) = (*this)(i, j);
  return t;
}

bool Matrix::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

void Matrix::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

std::string shape_str(const Matrix& m) {
  return "(" + std::to_string(m.rows()) + "x" + std::to_string(m.cols()) + ")";
}

namespace {

// out += a * b
void gemm_nn(const Matrix& a, const Matrix& b, Matrix& out) {
  const std::size_t n = a.rows(), inner = a.cols(), m = b.cols();
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  double* po = out.data().data();
  for (std::size_t i = 0; i < n; ++i) {
    double* orow = po + i * m;
    for (std::size_t p = 0; p < inner; ++p) {
      const double av = pa[i * inner + p];
      if (av == 0.0) continue;
      const double* brow = pb + p * m;
      for (std::size_t j = 0; j < m; ++j) orow[j] += av * brow[j];
    }
  }
}

// out += a * b^T, a is n x c, b is m x c
void gemm_nt(const Matrix& a, const Matrix& b, Matrix& out) {
  const std::size_t n = a.rows(), c = a.cols(), m = b.rows();
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  double* po = out.data().data();
  for (std::size_t i = 0; i < n; ++i) {
    const double* arow = pa + i * c;
    for (std::size_t p = 0; p < m; ++p) {
      const double* brow = pb + p * c;
      double acc = 0.0;
      for (std::size_t j = 0; j < c; ++j) acc += arow[j] * brow[j];
      po[i * m + p] += acc;
    }
  }
}

// out += a^T * b, a is n x k, b is n x m
void gemm_tn(const Matrix& a, const Matrix& b, Matrix& out) {
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  double* po = out.data().data();
  for (std::size_t i = 0; i < n; ++i) {
    const double* brow = pb + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = pa[i * k + p];
      if (av == 0.0) continue;
      double* orow = po + p * m;
      for (std::size_t j = 0; j < m; ++j) orow[j] += av * brow[j];
    }
  }
}

}  // namespace

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul " + shape_str(a) + " * " + shape_str(b));
  }
  Matrix out(a.rows(), b.cols());
  gemm_nn(a, b, out);
  return out;
}

// ---- graph nodes -----------------------------------------------------------

namespace detail {

struct Node {
  Matrix value;
  Matrix grad;
  bool requires_grad = false;
  bool leaf = true;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;
};

}  // namespace detail

using detail::Node;

namespace {

thread_local bool t_grad_enabled = true;

Matrix& grad_of(Node& n) {
  if (n.grad.rows() != n.value.rows() || n.grad.cols() != n.value.cols() ||
      n.grad.size() != n.value.size()) {
    n.grad = Matrix(n.value.rows(), n.value.cols());
  }
  return n.grad;
}

bool wants(const std::shared_ptr<Node>& p) { return p->requires_grad; }

Tensor make_op(Matrix value, std::vector<Tensor> inputs, const char* op,
               std::function<void(Node&)> fn) {
  if (!value.all_finite()) {
    throw NumericError(std::string("non-finite value produced by ") + op);
  }
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->op = op;
  bool needs = false;
  if (t_grad_enabled) {
    for (const auto& t : inputs) needs = needs || t.node()->requires_grad;
  }
  if (needs) {
    node->requires_grad = true;
    node->leaf = false;
    node->parents.reserve(inputs.size());
    for (const auto& t : inputs) node->parents.push_back(t.node());
    node->backward = std::move(fn);
  }
  return Tensor(std::move(node));
}

void require_defined(const Tensor& t, const char* op) {
  if (!t.defined()) throw Error(std::string("undefined tensor passed to ") + op);
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  require_defined(a, op);
  require_defined(b, op);
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": " + shape_str(a.value()) + " vs " + shape_str(b.value()));
  }
}

template <class F>
Tensor unary_map(const Tensor& a, const char* op, F f, std::function<void(Node&)> fn) {
  require_defined(a, op);
  Matrix out(a.rows(), a.cols());
  auto src = a.value().data();
  auto dst = out.data();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] = f(src[i]);
  return make_op(std::move(out), {a}, op, std::move(fn));
}

double stable_sigmoid(double x) {
  if (x >= 0) {
    const double z = std::exp(-x);
    return 1.0 / (1.0 + z);
  }
  const double z = std::exp(x);
  return z / (1.0 + z);
}

}  // namespace

bool grad_enabled() noexcept { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

// ---- Tensor ----------------------------------------------------------------

Tensor Tensor::constant(Matrix value) {
  if (!value.all_finite()) throw NumericError("non-finite constant");
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  return Tensor(std::move(node));
}

Tensor Tensor::parameter(Matrix value) {
  if (!value.all_finite()) throw NumericError("non-finite parameter");
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->requires_grad = true;
  return Tensor(std::move(node));
}

const Matrix& Tensor::value() const {
  if (!node_) throw Error("value() on undefined tensor");
  return node_->value;
}

Matrix& Tensor::mutable_value() {
  if (!node_) throw Error("mutable_value() on undefined tensor");
  if (!node_->leaf) throw Error("mutable_value() on a non-leaf tensor");
  return node_->value;
}

const Matrix& Tensor::grad() const {
  if (!node_) throw Error("grad() on undefined tensor");
  return node_->grad;
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

void Tensor::zero_grad() {
  if (node_) node_->grad = Matrix();
}

double Tensor::item() const {
  const Matrix& v = value();
  if (v.rows() != 1 || v.cols() != 1) throw ShapeError("item() on non-scalar " + shape_str(v));
  return v(0, 0);
}

void backward(const Tensor& loss) {
  if (!loss.defined()) throw Error("backward on undefined tensor");
  if (loss.rows() != 1 || loss.cols() != 1) {
    throw ShapeError("backward requires a scalar loss, got " + shape_str(loss.value()));
  }
  if (!loss.requires_grad()) return;

  // Iterative post-order DFS; state 1 = on the current path, 2 = finished.
  std::unordered_map<Node*, char> state;
  std::vector<Node*> order;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  state[loss.node().get()] = 1;
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (!p->requires_grad) continue;
      auto it = state.find(p);
      if (it == state.end()) {
        state[p] = 1;
        stack.emplace_back(p, 0);
      } else if (it->second == 1) {
        throw Error("cycle detected in autodiff graph");
      }
    } else {
      state[node] = 2;
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (Node* n : order) {
    if (!n->leaf) n->grad = Matrix();
  }
  grad_of(*loss.node())(0, 0) += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->leaf || !n->backward || n->grad.empty()) continue;
    if (!n->grad.all_finite()) {
      throw NumericError(std::string("non-finite gradient flowing into ") + n->op);
    }
    n->backward(*n);
  }
  for (Node* n : order) {
    if (n->leaf && !n->grad.empty() && !n->grad.all_finite()) {
      throw NumericError("non-finite gradient on a parameter");
    }
  }
}

// ---- ops -------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_defined(a, "matmul");
  require_defined(b, "matmul");
  Matrix out = matmul(a.value(), b.value());
  return make_op(std::move(out), {a, b}, "matmul", [](Node& self) {
    auto& pa = self.parents[0];
    auto& pb = self.parents[1];
    if (wants(pa)) gemm_nt(self.grad, pb->value, grad_of(*pa));
    if (wants(pb)) gemm_tn(pa->value, self.grad, grad_of(*pb));
  });
}

Tensor transpose(const Tensor& a) {
  require_defined(a, "transpose");
  return make_op(a.value().transposed(), {a}, "transpose", [](Node& self) {
    auto& g = grad_of(*self.parents[0]);
    const Matrix& d = self.grad;
    for (std::size_t i = 0; i < d.rows(); ++i)
      for (std::size_t j = 0; j < d.cols(); ++j) g(j, i) += d(i, j);
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Matrix out = a.value();
  auto o = out.data();
  auto bv = b.value().data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] += bv[i];
  return make_op(std::move(out), {a, b}, "add", [](Node& self) {
    for (auto& p : self.parents) {
      if (!wants(p)) continue;
      auto g = grad_of(*p).data();
      auto d = self.grad.data();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += d[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  Matrix out = a.value();
  auto o = out.data();
  auto bv = b.value().data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] -= bv[i];
  return make_op(std::move(out), {a, b}, "sub", [](Node& self) {
    auto d = self.grad.data();
    if (wants(self.parents[0])) {
      auto g = grad_of(*self.parents[0]).data();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += d[i];
    }
    if (wants(self.parents[1])) {
      auto g = grad_of(*self.parents[1]).data();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= d[i];
    }
  });
}

Tensor hadamard(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "hadamard");
  Matrix out = a.value();
  auto o = out.data();
  auto bv = b.value().data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] *= bv[i];
  return make_op(std::move(out), {a, b}, "hadamard", [](Node& self) {
    auto d = self.grad.data();
    auto& pa = self.parents[0];
    auto& pb = self.parents[1];
    if (wants(pa)) {
      auto g = grad_of(*pa).data();
      auto other = pb->value.data();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += d[i] * other[i];
    }
    if (wants(pb)) {
      auto g = grad_of(*pb).data();
      auto other = pa->value.data();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += d[i] * other[i];
    }
  });
}

Tensor add_row(const Tensor& a, const Tensor& row) {
  require_defined(a, "add_row");
  require_defined(row, "add_row");
  if (row.rows() != 1 || row.cols() != a.cols()) {
    throw ShapeError("add_row " + shape_str(a.value()) + " + " + shape_str(row.value()));
  }
  Matrix out = a.value();
  const Matrix& r = row.value();
  for (std::size_t i = 0; i < out.rows(); ++i)
    for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) += r(0, j);
  return make_op(std::move(out), {a, row}, "add_row", [](Node& self) {
    const Matrix& d = self.grad;
    if (wants(self.parents[0])) {
      auto g = grad_of(*self.parents[0]).data();
      auto dd = d.data();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += dd[i];
    }
    if (wants(self.parents[1])) {
      auto& g = grad_of(*self.parents[1]);
      for (std::size_t i = 0; i < d.rows(); ++i)
        for (std::size_t j = 0; j < d.cols(); ++j) g(0, j) += d(i, j);
    }
  });
}

Tensor mul_col(const Tensor& a, const Tensor& col) {
  require_defined(a, "mul_col");
  require_defined(col, "mul_col");
  if (col.cols() != 1 || col.rows() != a.rows()) {
    throw ShapeError("mul_col " + shape_str(a.value()) + " * " + shape_str(col.value()));
  }
  Matrix out = a.value();
  const Matrix& c = col.value();
  for (std::size_t i = 0; i < out.rows(); ++i)
    for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) *= c(i, 0);
  return make_op(std::move(out), {a, col}, "mul_col", [](Node& self) {
    const Matrix& d = self.grad;
    const Matrix& av = self.parents[0]->value;
    const Matrix& cv = self.parents[1]->value;
    if (wants(self.parents[0])) {
      auto& g = grad_of(*self.parents[0]);
      for (std::size_t i = 0; i < d.rows(); ++i)
        for (std::size_t j = 0; j < d.cols(); ++j) g(i, j) += d(i, j) * cv(i, 0);
    }
    if (wants(self.parents[1])) {
      auto& g = grad_of(*self.parents[1]);
      for (std::size_t i = 0; i < d.rows(); ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < d.cols(); ++j) acc += d(i, j) * av(i, j);
        g(i, 0) += acc;
      }
    }
  });
}

Tensor scale(const Tensor& a, double s) {
  return unary_map(a, "scale", [s](double x) { return s * x; }, [s](Node& self) {
    auto g = grad_of(*self.parents[0]).data();
    auto d = self.grad.data();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * d[i];
  });
}

Tensor add_scalar(const Tensor& a, double s) {
  return unary_map(a, "add_scalar", [s](double x) { return x + s; }, [](Node& self) {
    auto g = grad_of(*self.parents[0]).data();
    auto d = self.grad.data();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += d[i];
  });
}

Tensor relu(const Tensor& a) {
  return unary_map(a, "relu", [](double x) { return x > 0.0 ? x : 0.0; }, [](Node& self) {
    auto g = grad_of(*self.parents[0]).data();
    auto d = self.grad.data();
    auto y = self.value.data();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (y[i] > 0.0) g[i] += d[i];
  });
}

Tensor tanh(const Tensor& a) {
  return unary_map(a, "tanh", [](double x) { return std::tanh(x); }, [](Node& self) {
    auto g = grad_of(*self.parents[0]).data();
    auto d = self.grad.data();
    auto y = self.value.data();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += d[i] * (1.0 - y[i] * y[i]);
  });
}

Tensor sigmoid(const Tensor& a) {
  return unary_map(a, "sigmoid", stable_sigmoid, [](Node& self) {
    auto g = grad_of(*self.parents[0]).data();
    auto d = self.grad.data();
    auto y = self.value.data();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += d[i] * y[i] * (1.0 - y[i]);
  });
}

Tensor exp(const Tensor& a) {
  return unary_map(a, "exp", [](double x) { return std::exp(x); }, [](Node& self) {
    auto g = grad_of(*self.parents[0]).data();
    auto d = self.grad.data();
    auto y = self.value.data();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += d[i] * y[i];
  });
}

Tensor log(const Tensor& a) {
  require_defined(a, "log");
  for (double v : a.value().data()) {
    if (!(v > 0.0)) throw NumericError("log of non-positive value");
  }
  return unary_map(a, "log", [](double x) { return std::log(x); }, [](Node& self) {
    auto g = grad_of(*self.parents[0]).data();
    auto d = self.grad.data();
    auto x = self.parents[0]->value.data();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += d[i] / x[i];
  });
}

Tensor pow(const Tensor& a, double exponent) {
  return unary_map(
      a, "pow", [exponent](double x) { return std::pow(x, exponent); },
      [exponent](Node& self) {
        auto g = grad_of(*self.parents[0]).data();
        auto d = self.grad.data();
        auto x = self.parents[0]->value.data();
        for (std::size_t i = 0; i < g.size(); ++i)
          g[i] += d[i] * exponent * std::pow(x[i], exponent - 1.0);
      });
}

Tensor sum(const Tensor& a) {
  require_defined(a, "sum");
  double acc = 0.0;
  for (double v : a.value().data()) acc += v;
  return make_op(Matrix(1, 1, acc), {a}, "sum", [](Node& self) {
    auto g = grad_of(*self.parents[0]).data();
    const double d = self.grad(0, 0);
    for (double& x : g) x += d;
  });
}

Tensor mean(const Tensor& a) {
  require_defined(a, "mean");
  if (a.value().empty()) throw ShapeError("mean of empty tensor");
  const double n = static_cast<double>(a.value().size());
  double acc = 0.0;
  for (double v : a.value().data()) acc += v;
  return make_op(Matrix(1, 1, acc / n), {a}, "mean", [n](Node& self) {
    auto g = grad_of(*self.parents[0]).data();
    const double d = self.grad(0, 0) / n;
    for (double& x : g) x += d;
  });
}

Tensor row_sum(const Tensor& a) {
  require_defined(a, "row_sum");
  const Matrix& v = a.value();
  Matrix out(v.rows(), 1);
  for (std::size_t i = 0; i < v.rows(); ++i) {
    double acc = 0.0;
    for (double x : v.row(i)) acc += x;
    out(i, 0) = acc;
  }
  return make_op(std::move(out), {a}, "row_sum", [](Node& self) {
    auto& g = grad_of(*self.parents[0]);
    for (std::size_t i = 0; i < g.rows(); ++i)
      for (std::size_t j = 0; j < g.cols(); ++j) g(i, j) += self.grad(i, 0);
  });
}

Tensor col_mean(const Tensor& a) {
  require_defined(a, "col_mean");
  const Matrix& v = a.value();
  if (v.rows() == 0) throw ShapeError("col_mean of a matrix with no rows");
  const double n = static_cast<double>(v.rows());
  Matrix out(1, v.cols());
  for (std::size_t i = 0; i < v.rows(); ++i)
    for (std::size_t j = 0; j < v.cols(); ++j) out(0, j) += v(i, j);
  for (double& x : out.data()) x /= n;
  return make_op(std::move(out), {a}, "col_mean", [n](Node& self) {
    auto& g = grad_of(*self.parents[0]);
    for (std::size_t i = 0; i < g.rows(); ++i)
      for (std::size_t j = 0; j < g.cols(); ++j) g(i, j) += self.grad(0, j) / n;
  });
}

Tensor diagonal(const Tensor& a) {
  require_defined(a, "diagonal");
  const Matrix& v = a.value();
  if (v.rows() != v.cols()) throw ShapeError("diagonal of non-square " + shape_str(v));
  Matrix out(v.rows(), 1);
  for (std::size_t i = 0; i < v.rows(); ++i) out(i, 0) = v(i, i);
  return make_op(std::move(out), {a}, "diagonal", [](Node& self) {
    auto& g = grad_of(*self.parents[0]);
    for (std::size_t i = 0; i < g.rows(); ++i) g(i, i) += self.grad(i, 0);
  });
}

Tensor l1_norm(const Tensor& a) {
  require_defined(a, "l1_norm");
  double acc = 0.0;
  for (double v : a.value().data()) acc += std::abs(v);
  return make_op(Matrix(1, 1, acc), {a}, "l1_norm", [](Node& self) {
    auto g = grad_of(*self.parents[0]).data();
    auto x = self.parents[0]->value.data();
    const double d = self.grad(0, 0);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (x[i] > 0.0) g[i] += d;
      else if (x[i] < 0.0) g[i] -= d;
    }
  });
}

Tensor row_normalize(const Tensor& a) {
  require_defined(a, "row_normalize");
  const Matrix& v = a.value();
  Matrix out(v.rows(), v.cols());
  std::vector<double> norms(v.rows());
  for (std::size_t i = 0; i < v.rows(); ++i) {
    double ss = 0.0;
    for (double x : v.row(i)) ss += x * x;
    const double nrm = std::sqrt(ss);
    if (nrm == 0.0) {
      throw NumericError("row_normalize: row " + std::to_string(i) +
                         " has zero norm (cosine similarity undefined)");
    }
    norms[i] = nrm;
    for (std::size_t j = 0; j < v.cols(); ++j) out(i, j) = v(i, j) / nrm;
  }
  return make_op(std::move(out), {a}, "row_normalize", [norms = std::move(norms)](Node& self) {
    auto& g = grad_of(*self.parents[0]);
    const Matrix& y = self.value;
    const Matrix& d = self.grad;
    for (std::size_t i = 0; i < y.rows(); ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < y.cols(); ++j) dot += y(i, j) * d(i, j);
      for (std::size_t j = 0; j < y.cols(); ++j) g(i, j) += (d(i, j) - y(i, j) * dot) / norms[i];
    }
  });
}

Tensor cosine_similarity(const Tensor& a, const Tensor& b) {
  require_defined(a, "cosine_similarity");
  require_defined(b, "cosine_similarity");
  if (a.cols() != b.cols()) {
    throw ShapeError("cosine_similarity " + shape_str(a.value()) + " vs " + shape_str(b.value()));
  }
  return matmul(row_normalize(a), transpose(row_normalize(b)));
}

Tensor logsumexp_rows(const Tensor& a, bool exclude_diagonal) {
  require_defined(a, "logsumexp_rows");
  const Matrix& v = a.value();
  if (exclude_diagonal && v.rows() != v.cols()) {
    throw ShapeError("logsumexp_rows(exclude_diagonal) needs a square matrix, got " + shape_str(v));
  }
  Matrix out(v.rows(), 1);
  for (std::size_t i = 0; i < v.rows(); ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < v.cols(); ++j) {
      if (exclude_diagonal && i == j) continue;
      mx = std::max(mx, v(i, j));
    }
    if (!std::isfinite(mx)) throw ShapeError("logsumexp_rows: row has no entries");
    double acc = 0.0;
    for (std::size_t j = 0; j < v.cols(); ++j) {
      if (exclude_diagonal && i == j) continue;
      acc += std::exp(v(i, j) - mx);
    }
    out(i, 0) = mx + std::log(acc);
  }
  return make_op(std::move(out), {a}, "logsumexp_rows", [exclude_diagonal](Node& self) {
    auto& g = grad_of(*self.parents[0]);
    const Matrix& x = self.parents[0]->value;
    for (std::size_t i = 0; i < x.rows(); ++i) {
      const double d = self.grad(i, 0);
      const double lse = self.value(i, 0);
      for (std::size_t j = 0; j < x.cols(); ++j) {
        if (exclude_diagonal && i == j) continue;
        g(i, j) += d * std::exp(x(i, j) - lse);
      }
    }
  });
}

Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> labels) {
  require_defined(logits, "softmax_cross_entropy");
  const Matrix& x = logits.value();
  if (labels.size() != x.rows()) {
    throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(x.rows()) + " rows");
  }
  if (x.rows() == 0) throw ShapeError("softmax_cross_entropy: empty batch");
  std::vector<int> y(labels.begin(), labels.end());
  Matrix probs(x.rows(), x.cols());
  double total = 0.0;
  for (std::size_t i = 0; i < x.rows(); ++i) {
    if (y[i] < 0 || static_cast<std::size_t>(y[i]) >= x.cols()) {
      throw ShapeError("softmax_cross_entropy: label " + std::to_string(y[i]) + " out of range");
    }
    double mx = x(i, 0);
    for (std::size_t j = 1; j < x.cols(); ++j) mx = std::max(mx, x(i, j));
    double acc = 0.0;
    for (std::size_t j = 0; j < x.cols(); ++j) acc += std::exp(x(i, j) - mx);
    const double lse = mx + std::log(acc);
    for (std::size_t j = 0; j < x.cols(); ++j) probs(i, j) = std::exp(x(i, j) - lse);
    total += lse - x(i, static_cast<std::size_t>(y[i]));
  }
  const double n = static_cast<double>(x.rows());
  return make_op(Matrix(1, 1, total / n), {logits}, "softmax_cross_entropy",
                 [probs = std::move(probs), y = std::move(y), n](Node& self) {
                   auto& g = grad_of(*self.parents[0]);
                   const double d = self.grad(0, 0) / n;
                   for (std::size_t i = 0; i < probs.rows(); ++i) {
                     for (std::size_t j = 0; j < probs.cols(); ++j) g(i, j) += d * probs(i, j);
                     g(i, static_cast<std::size_t>(y[i])) -= d;
                   }
                 });
}

Tensor binary_cross_entropy_with_logits(const Tensor& logits, const Matrix& targets) {
  require_defined(logits, "binary_cross_entropy");
  const Matrix& x = logits.value();
  if (x.rows() != targets.rows() || x.cols() != targets.cols()) {
    throw ShapeError("binary_cross_entropy " + shape_str(x) + " vs targets " + shape_str(targets));
  }
  if (x.empty()) throw ShapeError("binary_cross_entropy: empty input");
  double total = 0.0;
  auto xs = x.data();
  auto ts = targets.data();
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double v = xs[i];
    total += std::max(v, 0.0) - v * ts[i] + std::log1p(std::exp(-std::abs(v)));
  }
  const double n = static_cast<double>(xs.size());
  return make_op(Matrix(1, 1, total / n), {logits}, "binary_cross_entropy",
                 [targets, n](Node& self) {
                   auto g = grad_of(*self.parents[0]).data();
                   auto xv = self.parents[0]->value.data();
                   auto tv = targets.data();
                   const double d = self.grad(0, 0) / n;
                   for (std::size_t i = 0; i < g.size(); ++i)
                     g[i] += d * (stable_sigmoid(xv[i]) - tv[i]);
                 });
}

Tensor repeat_cols(const Tensor& a, std::size_t times) {
  require_defined(a, "repeat_cols");
  const Matrix& v = a.value();
  Matrix out(v.rows(), v.cols() * times);
  for (std::size_t i = 0; i < v.rows(); ++i)
    for (std::size_t j = 0; j < v.cols(); ++j)
      for (std::size_t t = 0; t < times; ++t) out(i, j * times + t) = v(i, j);
  return make_op(std::move(out), {a}, "repeat_cols", [times](Node& self) {
    auto& g = grad_of(*self.parents[0]);
    for (std::size_t i = 0; i < g.rows(); ++i)
      for (std::size_t j = 0; j < g.cols(); ++j) {
        double acc = 0.0;
        for (std::size_t t = 0; t < times; ++t) acc += self.grad(i, j * times + t);
        g(i, j) += acc;
      }
  });
}

Tensor tile_cols(const Tensor& a, std::size_t times) {
  require_defined(a, "tile_cols");
  const Matrix& v = a.value();
  const std::size_t c = v.cols();
  Matrix out(v.rows(), c * times);
  for (std::size_t i = 0; i < v.rows(); ++i)
    for (std::size_t t = 0; t < times; ++t)
      for (std::size_t j = 0; j < c; ++j) out(i, t * c + j) = v(i, j);
  return make_op(std::move(out), {a}, "tile_cols", [times, c](Node& self) {
    auto& g = grad_of(*self.parents[0]);
    for (std::size_t i = 0; i < g.rows(); ++i)
      for (std::size_t t = 0; t < times; ++t)
        for (std::size_t j = 0; j < c; ++j) g(i, j) += self.grad(i, t * c + j);
  });
}

Tensor reshape(const Tensor& a, std::size_t rows, std::size_t cols) {
  require_defined(a, "reshape");
  if (rows * cols != a.value().size()) {
    throw ShapeError("reshape " + shape_str(a.value()) + " to (" + std::to_string(rows) + "x" +
                     std::to_string(cols) + ")");
  }
  auto src = a.value().data();
  Matrix out(rows, cols, std::vector<double>(src.begin(), src.end()));
  return make_op(std::move(out), {a}, "reshape", [](Node& self) {
    auto g = grad_of(*self.parents[0]).data();
    auto d = self.grad.data();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += d[i];
  });
}

Tensor gather_rows(const Tensor& a, std::span<const std::size_t> indices) {
  require_defined(a, "gather_rows");
  const Matrix& v = a.value();
  Matrix out(indices.size(), v.cols());
  for (std::size_t r = 0; r < indices.size(); ++r) {
    if (indices[r] >= v.rows()) throw ShapeError("gather_rows: index out of range");
    auto src = v.row(indices[r]);
    std::copy(src.begin(), src.end(), out.row(r).begin());
  }
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  return make_op(std::move(out), {a}, "gather_rows", [idx = std::move(idx)](Node& self) {
    auto& g = grad_of(*self.parents[0]);
    for (std::size_t r = 0; r < idx.size(); ++r) {
      auto dst = g.row(idx[r]);
      auto d = self.grad.row(r);
      for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += d[j];
    }
  });
}

}  // namespace gcbm
