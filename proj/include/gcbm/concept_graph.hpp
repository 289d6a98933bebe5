#pragma once

// Latent concept graph: one learnable adjacency per message-passing layer,
// plus the two-channel (embedding / activation) propagation rule.

#include <cstddef>
#include <random>
#include <span>
#include <vector>

#include "gcbm/tensor.hpp"

namespace gcbm {

inline constexpr double kDefaultEdgeThreshold = 0.01;

struct Edge {
  std::size_t source = 0;  // source < target
  std::size_t target = 0;
  double weight = 0.0;
  std::size_t layer = 0;

  friend bool operator==(const Edge&, const Edge&) = default;
};

using EdgeSet = std::vector<Edge>;

class LatentGraph {
 public:
  LatentGraph() = default;
  // Raw weights drawn uniform(-init_scale, init_scale).
  LatentGraph(std::size_t concepts, std::size_t layers, std::mt19937_64& rng,
              double init_scale = 0.1);
  // All raw weights zero, so every derived adjacency is zero.
  static LatentGraph zeros(std::size_t concepts, std::size_t layers);

  std::size_t concept_count() const noexcept { return k_; }
  std::size_t layer_count() const noexcept { return raw_.size(); }

  double edge_threshold() const noexcept { return threshold_; }
  void set_edge_threshold(double eps);

  // Learnable k x k raw matrices W, one per layer.
  const std::vector<Tensor>& raw_weights() const noexcept { return raw_; }

  // relu((W + W^T) / 2) with the diagonal masked to zero.
  Tensor adjacency(std::size_t layer) const;
  Matrix adjacency_value(std::size_t layer) const;

  // Overwrites layer `layer` so that its derived adjacency equals `a`
  // (which must be symmetric, non-negative, zero-diagonal).
  void set_adjacency(std::size_t layer, const Matrix& a);
  // Zeroes both symmetric entries of one edge in one layer.
  void remove_edge(std::size_t layer, std::size_t i, std::size_t j);

  LatentGraph clone() const;

 private:
  std::size_t k_ = 0;
  double threshold_ = kDefaultEdgeThreshold;
  std::vector<Tensor> raw_;
  Tensor off_diagonal_;
};

// Per-sample node state for a batch of n samples over k concepts:
//   emb is k x (n * d); sample s owns columns [s * d, (s + 1) * d)
//   act is k x n; column s is the activation vector of sample s
struct NodeState {
  Tensor emb;
  Tensor act;
  std::size_t dim = 0;

  std::size_t batch() const { return act.cols(); }
};

// D^{-1/2} (A + I) D^{-1/2} with D the row sums of A + I. Validates that `a`
// is square, symmetric and non-negative.
Matrix renormalize(const Matrix& a);
// Differentiable variant used inside the model; no validation.
Tensor renormalize(const Tensor& a);

// emb' = relu(A_norm (act (.) emb)), act' = tanh(A_norm act)
NodeState message_pass_layer(const NodeState& state, const Tensor& a_norm);

struct LayerTrace {
  NodeState final_state;
  std::vector<NodeState> per_layer;
};

LayerTrace run_layers(const LatentGraph& graph, const NodeState& init);

// Edges with derived weight above the graph's threshold, per layer.
EdgeSet extract_edges(const LatentGraph& graph);

// Distinct undirected (source, target) pairs of an EdgeSet, sorted.
std::vector<std::pair<std::size_t, std::size_t>> union_pairs(const EdgeSet& edges);

// Per-node degree in the union of all layers.
std::vector<std::size_t> node_degrees(const EdgeSet& edges, std::size_t concepts);

struct ActivatedSubgraph {
  std::vector<std::size_t> nodes;
  EdgeSet edges;
};

// Nodes with positive activation and the edges among them.
ActivatedSubgraph activated_subgraph(std::span<const double> activations, const EdgeSet& edges);

}  // namespace gcbm
