#pragma once

// Graph concept bottleneck model: concept scores -> latent-graph message
// passing -> label head, for the label-free and concept-supervised settings.

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "gcbm/concept_graph.hpp"
#include "gcbm/tensor.hpp"

namespace gcbm {

enum class Mode { label_free, concept_supervised };

std::string to_string(Mode mode);
Mode mode_from_string(const std::string& s);

// Fully connected network with ReLU between layers (none after the last).
class Mlp {
 public:
  Mlp() = default;
  // widths = {in, hidden..., out}. Weights and biases uniform(-1/sqrt(in), 1/sqrt(in)).
  Mlp(const std::vector<std::size_t>& widths, std::mt19937_64& rng);

  Tensor forward(const Tensor& x) const;
  std::vector<Tensor> parameters() const;

  std::size_t in_dim() const;
  std::size_t out_dim() const;
  std::size_t depth() const noexcept { return weights_.size(); }
  std::vector<std::size_t> widths() const;

  // Layer i: weight is in x out, bias is 1 x out.
  Tensor& weight(std::size_t i) { return weights_.at(i); }
  const Tensor& weight(std::size_t i) const { return weights_.at(i); }
  Tensor& bias(std::size_t i) { return biases_.at(i); }
  const Tensor& bias(std::size_t i) const { return biases_.at(i); }

  Mlp clone() const;

 private:
  std::vector<Tensor> weights_;
  std::vector<Tensor> biases_;
};

struct ModelConfig {
  Mode mode = Mode::label_free;
  std::size_t concepts = 0;  // k
  std::size_t dim = 0;       // d
  std::size_t classes = 0;   // |Y|
  std::size_t layers = 3;    // L
  std::size_t hidden = 128;  // width of the f2 / f3 hidden layer; 0 makes both linear
  // Hidden width of the supervised concept scorer; 0 makes it linear.
  std::size_t concept_hidden = 0;
  // Zero adjacency that is never trained (the no-graph ablation).
  bool ablate_graph = false;
  double graph_init_scale = 0.1;
  double edge_threshold = kDefaultEdgeThreshold;
  std::uint64_t seed = 0;
};

// Differentiable outputs of a batched forward pass over n samples.
struct ForwardTrace {
  Tensor c;          // n x k initial scores
  Tensor c_tilde;    // n x k updated scores
  Tensor z_g;        // n x d mean-pooled graph embedding
  Tensor anchor;     // n x k activation-contrast anchor (f3(z_v), or the linear map in supervised mode)
  Tensor logits;     // n x |Y|
};

// Plain-value outputs for inference.
struct ForwardOutput {
  Matrix c;
  Matrix c_tilde;
  Matrix z_g;
  Matrix z_v_proj;
  Matrix logits;
  std::vector<int> y_hat;
};

std::vector<int> argmax_rows(const Matrix& logits);

class GraphCbmModel {
 public:
  GraphCbmModel() = default;
  // Label-free mode needs the frozen k x d concept embeddings; supervised
  // mode ignores `concept_embeddings` and learns its own table.
  GraphCbmModel(const ModelConfig& cfg, const Matrix& concept_embeddings);

  const ModelConfig& config() const noexcept { return cfg_; }
  Mode mode() const noexcept { return cfg_.mode; }

  // z_T scores c = z_v z_T^T, label-free only.
  Tensor concept_scores_labelfree(const Tensor& z_v) const;
  // c = concept_mlp(z_v), supervised only.
  Tensor concept_scores_supervised(const Tensor& z_v) const;
  Tensor concept_scores(const Tensor& z_v) const;

  // Full differentiable forward pass over an n x d batch.
  ForwardTrace forward(const Matrix& z_v) const;
  // Graph + head only, starting from (possibly edited) initial scores.
  // `anchor` is left undefined.
  ForwardTrace propagate(const Tensor& c) const;

  ForwardOutput predict(const Matrix& z_v) const;
  ForwardOutput predict_from_scores(const Matrix& c) const;
  Matrix initial_scores(const Matrix& z_v) const;

  // Parameters the optimizer updates in this mode.
  std::vector<Tensor> trainable_parameters() const;
  // Every parameter matrix by stable name, for checkpoints.
  std::vector<std::pair<std::string, Tensor>> named_parameters() const;

  LatentGraph& graph() noexcept { return graph_; }
  const LatentGraph& graph() const noexcept { return graph_; }
  const Tensor& concept_embeddings() const noexcept { return concepts_; }
  Mlp& head() noexcept { return head_; }
  const Mlp& head() const noexcept { return head_; }
  Mlp& projector() noexcept { return projector_; }
  const Mlp& projector() const noexcept { return projector_; }
  Mlp& concept_mlp() noexcept { return concept_mlp_; }
  const Mlp& concept_mlp() const noexcept { return concept_mlp_; }

  GraphCbmModel clone() const;

 private:
  ModelConfig cfg_;
  Tensor concepts_;     // k x d; constant in label-free mode, parameter in supervised mode
  LatentGraph graph_;
  Mlp head_;            // f2: k -> |Y|
  Mlp projector_;       // f3: d -> k (label-free) or linear d -> k anchor map (supervised)
  Mlp concept_mlp_;     // d -> k, supervised only
};

// Checkpoint: magic "GCBK", u16 version, u32 length + UTF-8 JSON header
// (model config, parameter names/shapes, free-form config echo), u32
// parameter count, then per parameter u32 name length, name bytes, and one
// GCBM matrix block.
void save_checkpoint(const std::filesystem::path& path, const GraphCbmModel& model,
                     const std::string& config_echo_json = "{}");
GraphCbmModel load_checkpoint(const std::filesystem::path& path, std::string* config_echo_json = nullptr);

std::string model_config_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const std::string& json);

}  // namespace gcbm
