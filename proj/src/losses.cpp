#include "gcbm/losses.hpp"

namespace gcbm {

void LossConfig::validate() const {
  if (!(tau > 0.0)) throw ConfigError("tau must be > 0");
  if (!(alpha >= 0.0)) throw ConfigError("alpha must be >= 0");
  if (!(beta >= 0.0)) throw ConfigError("beta must be >= 0");
}

Tensor nt_xent(const Tensor& anchors, const Tensor& positives, double tau) {
  if (!(tau > 0.0)) throw ConfigError("nt_xent: tau must be > 0");
  if (anchors.rows() != positives.rows() || anchors.cols() != positives.cols()) {
    throw ShapeError("nt_xent: anchors " + shape_str(anchors.value()) + " vs positives " +
                     shape_str(positives.value()));
  }
  if (anchors.rows() < 2) throw ShapeError("nt_xent needs at least 2 rows (one negative per anchor)");
  Tensor logits = scale(cosine_similarity(anchors, positives), 1.0 / tau);
  Tensor per_sample = sub(logsumexp_rows(logits, /*exclude_diagonal=*/true), diagonal(logits));
  return mean(per_sample);
}

Tensor l1_penalty(const LatentGraph& graph) {
  Tensor total = l1_norm(graph.adjacency(0));
  for (std::size_t l = 1; l < graph.layer_count(); ++l) total = add(total, l1_norm(graph.adjacency(l)));
  return total;
}

namespace {

void add_l1(LossTerms& terms, Tensor& total, const LatentGraph& graph, const LossConfig& cfg) {
  if (cfg.beta > 0.0) {
    Tensor l1 = l1_penalty(graph);
    terms.l1 = l1.item();
    total = add(total, scale(l1, cfg.beta));
  } else {
    NoGradGuard guard;
    terms.l1 = l1_penalty(graph).item();
  }
}

}  // namespace

LossTerms total_loss_labelfree(const ForwardTrace& out, std::span<const int> labels,
                               const Matrix& z_v, const LatentGraph& graph, const LossConfig& cfg) {
  cfg.validate();
  if (cfg.mode != Mode::label_free) throw ConfigError("total_loss_labelfree called with a supervised config");
  LossTerms terms;
  Tensor total = softmax_cross_entropy(out.logits, labels);
  terms.ce = total.item();
  if (cfg.alpha > 0.0) {
    if (labels.size() < 2) throw ShapeError("contrastive terms need a batch of at least 2");
    Tensor l_emb = nt_xent(Tensor::constant(z_v), out.z_g, cfg.tau);
    Tensor l_act = nt_xent(out.anchor, out.c_tilde, cfg.tau);
    terms.l_emb = l_emb.item();
    terms.l_act = l_act.item();
    total = add(total, scale(add(l_emb, l_act), cfg.alpha));
  }
  add_l1(terms, total, graph, cfg);
  terms.total = total;
  return terms;
}

LossTerms total_loss_supervised(const ForwardTrace& out, std::span<const int> labels,
                                const Matrix& annotations, const LatentGraph& graph,
                                const LossConfig& cfg) {
  cfg.validate();
  if (cfg.mode != Mode::concept_supervised) {
    throw ConfigError("total_loss_supervised called with a label-free config");
  }
  for (double v : annotations.data()) {
    if (v != 0.0 && v != 1.0) throw ConfigError("concept annotations must be binary");
  }
  LossTerms terms;
  Tensor ce = softmax_cross_entropy(out.logits, labels);
  Tensor bce = binary_cross_entropy_with_logits(out.c_tilde, annotations);
  terms.ce = ce.item();
  terms.bce = bce.item();
  Tensor total = add(ce, bce);
  if (cfg.alpha > 0.0) {
    if (labels.size() < 2) throw ShapeError("contrastive terms need a batch of at least 2");
    Tensor l_act = nt_xent(out.anchor, out.c_tilde, cfg.tau);
    terms.l_act = l_act.item();
    total = add(total, scale(l_act, cfg.alpha));
  }
  add_l1(terms, total, graph, cfg);
  terms.total = total;
  return terms;
}

}  // namespace gcbm
