#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "gcbm/data_io.hpp"
#include "gcbm/model.hpp"

namespace gcbm {

// Per-class mean-difference vectors d^j = mean(R^j) - mean(W^j) over initial
// concept scores, where R^j / W^j hold the correctly / wrongly predicted
// samples of true class j.
struct InterventionPrototypes {
  std::vector<std::optional<std::vector<double>>> delta;  // one slot per class
  std::vector<std::size_t> right_counts;
  std::vector<std::size_t> wrong_counts;

  std::size_t classes() const noexcept { return delta.size(); }
  bool available(std::size_t cls) const { return cls < delta.size() && delta[cls].has_value(); }
  std::size_t available_count() const;
};

InterventionPrototypes build_difference_prototypes(const Matrix& scores, std::span<const int> predicted,
                                                   std::span<const int> labels, std::size_t classes);
InterventionPrototypes build_difference_prototypes(const GraphCbmModel& model, const EmbeddingDataset& data);

// c + d^true_class. Returns c unchanged when the prototype is missing; then
// `applied` (if given) is set to false.
std::vector<double> lazy_intervene(std::span<const double> c, int true_class,
                                   const InterventionPrototypes& protos, bool* applied = nullptr);

struct LazyOutcome {
  double accuracy_before = 0.0;
  double accuracy_after = 0.0;
  std::size_t intervened = 0;
  std::size_t skipped_no_prototype = 0;
};

// Lazy intervention on every misclassified sample of `data`, then one
// forward pass from the graph layer onward.
LazyOutcome lazy_intervene_dataset(const GraphCbmModel& model, const EmbeddingDataset& data,
                                   const InterventionPrototypes& protos);

enum class Policy { ucp, random };
std::string to_string(Policy p);
Policy policy_from_string(const std::string& s);

// round(ratio * k) indices with the smallest |sigmoid(c_j) - 0.5|, lower
// index first on ties, returned in ascending order.
std::vector<std::size_t> select_concepts_ucp(std::span<const double> c, double ratio);
// round(ratio * k) indices drawn uniformly without replacement, ascending.
std::vector<std::size_t> select_concepts_random(std::size_t k, double ratio, std::mt19937_64& rng);
std::vector<std::size_t> select_concepts(std::span<const double> c, double ratio, Policy policy,
                                         std::mt19937_64& rng);

inline constexpr double kDefaultInterventionGamma = 3.0;

// Selected concepts whose thresholded prediction disagrees with the
// annotation are set to +gamma (annotated 1) or -gamma (annotated 0).
std::vector<double> intervene_supervised(std::span<const double> c, std::span<const double> annotations,
                                         std::span<const std::size_t> selected,
                                         double gamma = kDefaultInterventionGamma);

// One sample under the mode-appropriate rule. Label-free: if the sample is
// misclassified and d^label exists, c_j += d^label_j for selected j only.
// Supervised: intervene_supervised on the selected indices.
std::vector<double> intervene_row(Mode mode, std::span<const double> c, int label, bool misclassified,
                                  std::span<const double> annotations, const InterventionPrototypes& protos,
                                  std::span<const std::size_t> selected, double gamma = kDefaultInterventionGamma);

struct CurveConfig {
  Policy policy = Policy::ucp;
  double gamma = kDefaultInterventionGamma;
  std::uint64_t seed = 0;  // random policy only
};

struct CurvePoint {
  double ratio = 0.0;
  double accuracy = 0.0;
};

// Accuracy after intervening on every sample of `data` at each ratio.
// Label-free prototypes come from `prototype_data` (default: `data` itself).
std::vector<CurvePoint> intervention_curve(const GraphCbmModel& model, const EmbeddingDataset& data,
                                           std::span<const double> ratios, const CurveConfig& cfg = {},
                                           const EmbeddingDataset* prototype_data = nullptr);

}  // namespace gcbm
