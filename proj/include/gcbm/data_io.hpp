#pragma once

// Embedding datasets on disk, the planted-graph synthetic generator, and
// graph-recovery scoring.

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "gcbm/concept_graph.hpp"
#include "gcbm/model.hpp"
#include "gcbm/tensor.hpp"

namespace gcbm {

struct EmbeddingDataset {
  Mode mode = Mode::label_free;
  Matrix images;                    // n x d
  std::vector<int> labels;          // n, in [0, classes)
  std::size_t classes = 0;          // m
  Matrix concepts;                  // k x d, may be empty in supervised mode
  Matrix annotations;               // n x k binary, may be empty in label-free mode
  std::vector<std::string> concept_names;
  std::map<std::string, std::vector<std::size_t>> splits;

  std::size_t size() const noexcept { return images.rows(); }
  std::size_t dim() const noexcept { return images.cols(); }
  std::size_t concept_count() const noexcept { return concept_names.size(); }
  bool has_concepts() const noexcept { return !concepts.empty(); }
  bool has_annotations() const noexcept { return !annotations.empty(); }

  // Rows `indices`, in order; the result carries no splits.
  EmbeddingDataset select(const std::vector<std::size_t>& indices) const;
  // Samples of split `name`; throws ConfigError if the split is unknown.
  EmbeddingDataset split(const std::string& name) const;
  bool has_split(const std::string& name) const { return splits.count(name) && !splits.at(name).empty(); }

  // Throws FormatError on any inconsistency.
  void validate() const;
  // Throws ConfigError when `mode` cannot be trained on this data.
  void require_mode(Mode mode) const;
};

// Directory layout: meta.json, images.gcbm, labels.gcbm, and optionally
// concepts.gcbm and annotations.gcbm.
void save_dataset(const std::filesystem::path& dir, const EmbeddingDataset& data);
EmbeddingDataset load_dataset(const std::filesystem::path& dir);

struct SyntheticSpec {
  std::size_t concepts = 30;
  std::size_t dim = 16;
  std::size_t classes = 10;
  std::size_t n_train = 2000;
  std::size_t n_val = 500;
  std::size_t n_test = 500;
  // Probability that a concept pair is a planted edge.
  double density = 0.1;
  // Ising coupling on planted edges; 0 gives independent concepts.
  double strength = 1.0;
  // Ising field; negative values make concepts sparse.
  double field = -0.5;
  std::size_t gibbs_rounds = 25;
  // Std-dev of the gaussian noise added to each image-embedding coordinate.
  double noise = 0.1;
  std::uint64_t label_seed = 7;
  Mode mode = Mode::label_free;

  void validate() const;
};

struct SyntheticData {
  EmbeddingDataset data;
  EdgeSet planted;  // layer 0, weight 1
  std::uint64_t seed_used = 0;
};

SyntheticData generate_synthetic(const SyntheticSpec& spec, std::uint64_t seed);

std::string synthetic_spec_json(const SyntheticSpec& spec);
SyntheticSpec synthetic_spec_from_json(const std::string& text);

struct RecoveryMetrics {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  // Expected F1 of a uniform random graph with as many edges as `learned`.
  double random_baseline_f1 = 0.0;
  std::size_t learned_edges = 0;
  std::size_t planted_edges = 0;
};

// Set metrics on undirected edge identity, layers merged.
RecoveryMetrics graph_recovery_metrics(const EdgeSet& learned, const EdgeSet& planted, std::size_t concepts);

// Pearson correlation of two equally long sequences; 0 when either is constant.
double pearson(std::span<const double> a, std::span<const double> b);

}  // namespace gcbm
