#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "gcbm/data_io.hpp"
#include "gcbm/model.hpp"

namespace gcbm {

struct TrainConfig {
  std::size_t epochs = 50;
  std::size_t batch_size = 512;
  double lr = 1e-3;
  double alpha = 0.1;
  double beta = 0.05;
  double tau = 0.3;
  std::size_t layers = 3;
  std::uint64_t seed = 0;
  Mode mode = Mode::label_free;
  std::size_t hidden = 128;
  std::size_t concept_hidden = 0;
  bool ablate_graph = false;
  double graph_init_scale = 0.1;
  double edge_threshold = kDefaultEdgeThreshold;

  void validate() const;
  ModelConfig model_config(const EmbeddingDataset& data) const;
};

// JSON keys are the field names above; missing keys keep their defaults.
std::string train_config_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const std::string& text);

struct EpochRecord {
  double total = 0.0;  // batch means, averaged over the epoch
  double ce = 0.0;
  double bce = 0.0;
  double l_emb = 0.0;
  double l_act = 0.0;
  double l1 = 0.0;
  double train_accuracy = 0.0;  // running, on the batches as they were trained
  double val_accuracy = 0.0;
  std::optional<double> val_concept_auc;
  std::size_t edge_count = 0;  // union EdgeSet size after the epoch

  friend bool operator==(const EpochRecord&, const EpochRecord&) = default;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;

  std::string to_json() const;
  static TrainHistory from_json(const std::string& text);
  friend bool operator==(const TrainHistory&, const TrainHistory&) = default;
};

struct TrainResult {
  GraphCbmModel best;         // highest val accuracy, earliest epoch on ties
  GraphCbmModel final_model;  // after the last epoch
  TrainHistory history;
  std::size_t best_epoch = 0;
};

// Trains on the "train" split (all samples when absent) and selects on "val"
// (the final epoch when absent). With `out_dir`, writes best.gcbm,
// final.gcbm and history.json there.
TrainResult train(const TrainConfig& cfg, const EmbeddingDataset& data,
                  const std::optional<std::filesystem::path>& out_dir = std::nullopt);

struct Metrics {
  double label_accuracy = 0.0;
  std::optional<double> concept_roc_auc;  // supervised mode with annotations only
  std::vector<std::size_t> skipped_concepts;  // single-class ground truth
  std::size_t samples = 0;
};

// Inference over every row of `data`, in chunks; rows are independent so the
// result does not depend on the chunking.
ForwardOutput predict_dataset(const GraphCbmModel& model, const Matrix& images);
// Same, starting from (possibly edited) initial concept scores.
ForwardOutput predict_scores_dataset(const GraphCbmModel& model, const Matrix& scores);

Metrics evaluate(const GraphCbmModel& model, const EmbeddingDataset& data);
double accuracy(std::span<const int> predicted, std::span<const int> labels);

// Mann-Whitney statistic; ties count 1/2. Throws when only one class is present.
double roc_auc(std::span<const double> scores, std::span<const int> labels);

}  // namespace gcbm
