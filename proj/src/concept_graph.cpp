#include "gcbm/concept_graph.hpp"

#include <algorithm>
#include <cmath>

namespace gcbm {

namespace {

Tensor off_diagonal_mask(std::size_t k) {
  Matrix m(k, k, 1.0);
  for (std::size_t i = 0; i < k; ++i) m(i, i) = 0.0;
  return Tensor::constant(std::move(m));
}

}  // namespace

LatentGraph::LatentGraph(std::size_t concepts, std::size_t layers, std::mt19937_64& rng,
                         double init_scale)
    : k_(concepts), off_diagonal_(off_diagonal_mask(concepts)) {
  if (layers == 0) throw ConfigError("LatentGraph needs at least one layer");
  if (concepts == 0) throw ConfigError("LatentGraph needs at least one concept");
  std::uniform_real_distribution<double> dist(-init_scale, init_scale);
  for (std::size_t l = 0; l < layers; ++l) {
    Matrix w(k_, k_);
    for (double& x : w.data()) x = dist(rng);
    raw_.push_back(Tensor::parameter(std::move(w)));
  }
}

LatentGraph LatentGraph::zeros(std::size_t concepts, std::size_t layers) {
  if (layers == 0) throw ConfigError("LatentGraph needs at least one layer");
  if (concepts == 0) throw ConfigError("LatentGraph needs at least one concept");
  LatentGraph g;
  g.k_ = concepts;
  g.off_diagonal_ = off_diagonal_mask(concepts);
  for (std::size_t l = 0; l < layers; ++l) g.raw_.push_back(Tensor::parameter(Matrix(concepts, concepts)));
  return g;
}

void LatentGraph::set_edge_threshold(double eps) {
  if (!(eps >= 0.0)) throw ConfigError("edge threshold must be >= 0");
  threshold_ = eps;
}

Tensor LatentGraph::adjacency(std::size_t layer) const {
  const Tensor& w = raw_.at(layer);
  Tensor sym = scale(add(w, transpose(w)), 0.5);
  return hadamard(relu(sym), off_diagonal_);
}

Matrix LatentGraph::adjacency_value(std::size_t layer) const {
  const Matrix& w = raw_.at(layer).value();
  Matrix a(k_, k_);
  for (std::size_t i = 0; i < k_; ++i)
    for (std::size_t j = 0; j < k_; ++j) {
      if (i == j) continue;
      const double s = 0.5 * (w(i, j) + w(j, i));
      a(i, j) = s > 0.0 ? s : 0.0;
    }
  return a;
}

void LatentGraph::set_adjacency(std::size_t layer, const Matrix& a) {
  if (a.rows() != k_ || a.cols() != k_) throw ShapeError("set_adjacency: wrong shape " + shape_str(a));
  for (std::size_t i = 0; i < k_; ++i) {
    if (a(i, i) != 0.0) throw ConfigError("set_adjacency: diagonal must be zero");
    for (std::size_t j = 0; j < k_; ++j) {
      if (a(i, j) < 0.0 || a(i, j) != a(j, i)) {
        throw ConfigError("set_adjacency: matrix must be symmetric and non-negative");
      }
    }
  }
  raw_.at(layer).mutable_value() = a;
}

void LatentGraph::remove_edge(std::size_t layer, std::size_t i, std::size_t j) {
  Matrix& w = raw_.at(layer).mutable_value();
  w(i, j) = 0.0;
  w(j, i) = 0.0;
}

LatentGraph LatentGraph::clone() const {
  LatentGraph g;
  g.k_ = k_;
  g.threshold_ = threshold_;
  g.off_diagonal_ = off_diagonal_;
  for (const auto& w : raw_) g.raw_.push_back(Tensor::parameter(w.value()));
  return g;
}

Matrix renormalize(const Matrix& a) {
  if (a.rows() != a.cols()) throw ShapeError("renormalize: non-square " + shape_str(a));
  const std::size_t k = a.rows();
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < k; ++j) {
      if (a(i, j) < 0.0) throw ConfigError("renormalize: negative entry");
      if (a(i, j) != a(j, i)) throw ConfigError("renormalize: asymmetric input");
    }
  Matrix at = a;
  for (std::size_t i = 0; i < k; ++i) at(i, i) += 1.0;
  std::vector<double> dinv(k);
  for (std::size_t i = 0; i < k; ++i) {
    double deg = 0.0;
    for (double v : at.row(i)) deg += v;
    dinv[i] = 1.0 / std::sqrt(deg);
  }
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < k; ++j) at(i, j) *= dinv[i] * dinv[j];
  return at;
}

Tensor renormalize(const Tensor& a) {
  const std::size_t k = a.rows();
  Tensor with_loops = add(a, Tensor::constant(Matrix::identity(k)));
  Tensor dinv = pow(row_sum(with_loops), -0.5);
  return hadamard(with_loops, matmul(dinv, transpose(dinv)));
}

NodeState message_pass_layer(const NodeState& state, const Tensor& a_norm) {
  const std::size_t k = state.act.rows();
  if (a_norm.rows() != k || a_norm.cols() != k) {
    throw ShapeError("message_pass_layer: adjacency " + shape_str(a_norm.value()) + " for " +
                     std::to_string(k) + " nodes");
  }
  if (state.emb.rows() != k || state.emb.cols() != state.batch() * state.dim) {
    throw ShapeError("message_pass_layer: embedding state " + shape_str(state.emb.value()) +
                     " inconsistent with activations " + shape_str(state.act.value()));
  }
  NodeState next;
  next.dim = state.dim;
  Tensor weighted = hadamard(repeat_cols(state.act, state.dim), state.emb);
  next.emb = relu(matmul(a_norm, weighted));
  next.act = tanh(matmul(a_norm, state.act));
  return next;
}

LayerTrace run_layers(const LatentGraph& graph, const NodeState& init) {
  if (graph.layer_count() == 0) throw ConfigError("run_layers: graph has no layers");
  LayerTrace trace;
  NodeState cur = init;
  for (std::size_t l = 0; l < graph.layer_count(); ++l) {
    cur = message_pass_layer(cur, renormalize(graph.adjacency(l)));
    trace.per_layer.push_back(cur);
  }
  trace.final_state = cur;
  return trace;
}

EdgeSet extract_edges(const LatentGraph& graph) {
  EdgeSet edges;
  const std::size_t k = graph.concept_count();
  for (std::size_t l = 0; l < graph.layer_count(); ++l) {
    const Matrix a = graph.adjacency_value(l);
    for (std::size_t i = 0; i < k; ++i)
      for (std::size_t j = i + 1; j < k; ++j)
        if (a(i, j) > graph.edge_threshold()) edges.push_back({i, j, a(i, j), l});
  }
  return edges;
}

std::vector<std::pair<std::size_t, std::size_t>> union_pairs(const EdgeSet& edges) {
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  pairs.reserve(edges.size());
  for (const auto& e : edges) {
    pairs.emplace_back(std::min(e.source, e.target), std::max(e.source, e.target));
  }
  std::sort(pairs.begin(), pairs.end());
  pairs.erase(std::unique(pairs.begin(), pairs.end()), pairs.end());
  return pairs;
}

std::vector<std::size_t> node_degrees(const EdgeSet& edges, std::size_t concepts) {
  std::vector<std::size_t> deg(concepts, 0);
  for (const auto& [i, j] : union_pairs(edges)) {
    ++deg.at(i);
    ++deg.at(j);
  }
  return deg;
}

ActivatedSubgraph activated_subgraph(std::span<const double> activations, const EdgeSet& edges) {
  ActivatedSubgraph out;
  for (std::size_t i = 0; i < activations.size(); ++i)
    if (activations[i] > 0.0) out.nodes.push_back(i);
  auto active = [&](std::size_t i) { return i < activations.size() && activations[i] > 0.0; };
  for (const auto& e : edges)
    if (active(e.source) && active(e.target)) out.edges.push_back(e);
  return out;
}

}  // namespace gcbm
