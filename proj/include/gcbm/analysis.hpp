#pragma once

// Post-hoc analyses of trained models: salient-subgraph pruning, concept
// attacks, beta sweeps, and graph / activation exports.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "gcbm/data_io.hpp"
#include "gcbm/model.hpp"
#include "gcbm/training.hpp"

namespace gcbm {

// ---- salient subgraph ------------------------------------------------------

enum class EdgeOrder { descending_weight, ascending_weight };

struct SalientResult {
  GraphCbmModel pruned;
  EdgeSet kept;
  EdgeSet removed;  // in visit order
  double accuracy_before = 0.0;
  double accuracy_after = 0.0;
  std::optional<double> auc_before;
  std::optional<double> auc_after;
};

// Single greedy pass: each edge is zeroed in its own layer and the deletion
// is kept iff accuracy on `val` does not drop below the current accuracy.
SalientResult salient_subgraph(const GraphCbmModel& model, const EmbeddingDataset& val,
                               EdgeOrder order = EdgeOrder::descending_weight);

// ---- concept attacks -------------------------------------------------------

enum class AttackGroup { connected, isolated, random };
enum class AttackMode { mask, perturb };

std::string to_string(AttackGroup g);
std::string to_string(AttackMode m);
AttackGroup attack_group_from_string(const std::string& s);
AttackMode attack_mode_from_string(const std::string& s);

struct AttackConfig {
  AttackGroup group = AttackGroup::random;
  AttackMode mode = AttackMode::mask;
  std::size_t n = 1;
  std::size_t trials = 20;
  std::uint64_t seed = 0;
  double noise_sigma = 1.0;  // perturb mode
};

struct AttackReport {
  AttackGroup group = AttackGroup::random;
  AttackMode mode = AttackMode::mask;
  std::size_t n_attacked = 0;
  std::size_t group_size = 0;
  double baseline_accuracy = 0.0;
  std::vector<double> accuracies;  // one per trial
  double mean = 0.0;
  double std = 0.0;  // population
};

// Connected: degree >= 1 in the union EdgeSet; isolated: degree 0; random: all.
std::vector<std::size_t> attack_group_members(const GraphCbmModel& model, AttackGroup group);

AttackReport attack_eval(const GraphCbmModel& model, const EmbeddingDataset& data, const AttackConfig& cfg);

// ---- beta sweep ------------------------------------------------------------

struct SweepRow {
  double beta = 0.0;
  std::vector<double> accuracies;      // per seed, best model on the eval split
  std::vector<std::size_t> edge_counts;  // per seed, final model union EdgeSet
  double accuracy_mean = 0.0;
  double accuracy_std = 0.0;
  double edges_mean = 0.0;
  double edges_std = 0.0;

  friend bool operator==(const SweepRow&, const SweepRow&) = default;
};

struct SweepReport {
  std::vector<std::uint64_t> seeds;
  std::string eval_split;
  std::vector<SweepRow> rows;

  std::string to_json() const;
  static SweepReport from_json(const std::string& text);
  friend bool operator==(const SweepReport&, const SweepReport&) = default;
};

// One training run per (beta, seed). Evaluates on `eval_split` if the dataset
// has it, otherwise on every sample.
SweepReport beta_sweep(const TrainConfig& base, std::span<const double> betas, const EmbeddingDataset& data,
                       std::span<const std::uint64_t> seeds, const std::string& eval_split = "test");

// ---- exports ---------------------------------------------------------------

enum class GraphFormat { json, dot };
GraphFormat graph_format_from_string(const std::string& s);

// {"nodes":[{"id","name"}],"edges":[{"source","target","weight","layer"}]},
// weights from the derived adjacency, edges thresholded per layer.
std::string graph_json(const GraphCbmModel& model, const std::vector<std::string>& concept_names);
std::string graph_dot(const GraphCbmModel& model, const std::vector<std::string>& concept_names);
void export_graph(const GraphCbmModel& model, const std::vector<std::string>& concept_names,
                  const std::filesystem::path& path, GraphFormat format);

struct ImportedGraph {
  std::vector<std::string> concept_names;
  EdgeSet edges;
};
ImportedGraph import_graph_json(const std::string& text);

// n x (k + 1) GCBM matrix: c_tilde rows followed by the label column.
Matrix activation_matrix(const GraphCbmModel& model, const EmbeddingDataset& data);
void export_activations(const GraphCbmModel& model, const EmbeddingDataset& data, const std::filesystem::path& path);

}  // namespace gcbm
