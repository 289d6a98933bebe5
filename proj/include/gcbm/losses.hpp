#pragma once

#include <span>

#include "gcbm/concept_graph.hpp"
#include "gcbm/model.hpp"
#include "gcbm/tensor.hpp"

namespace gcbm {

struct LossConfig {
  double alpha = 0.1;
  double beta = 0.05;
  double tau = 0.3;
  Mode mode = Mode::label_free;

  void validate() const;
};

// Individual terms, kept for logging.
struct LossTerms {
  Tensor total;
  double ce = 0.0;
  double bce = 0.0;
  double l_emb = 0.0;
  double l_act = 0.0;
  double l1 = 0.0;
};

// Mean over i of -log( exp(s_ii / tau) / sum_{j != i} exp(s_ij / tau) ) with
// s_ij = cos(anchor_i, positive_j). Can be negative: the positive pair is not
// part of the denominator.
Tensor nt_xent(const Tensor& anchors, const Tensor& positives, double tau);

// Sum of |A| over every layer's derived adjacency.
Tensor l1_penalty(const LatentGraph& graph);

// CE + alpha (L_emb + L_act) + beta * l1
LossTerms total_loss_labelfree(const ForwardTrace& out, std::span<const int> labels,
                               const Matrix& z_v, const LatentGraph& graph, const LossConfig& cfg);

// CE + BCE(sigmoid(c_tilde), annotations) + alpha L_act + beta * l1
LossTerms total_loss_supervised(const ForwardTrace& out, std::span<const int> labels,
                                const Matrix& annotations, const LatentGraph& graph,
                                const LossConfig& cfg);

}  // namespace gcbm
