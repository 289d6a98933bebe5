#include "gcbm/intervention.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "gcbm/training.hpp"

namespace gcbm {

std::size_t InterventionPrototypes::available_count() const {
  return static_cast<std::size_t>(std::count_if(delta.begin(), delta.end(), [](const auto& d) { return d.has_value(); }));
}

InterventionPrototypes build_difference_prototypes(const Matrix& scores, std::span<const int> predicted,
                                                   std::span<const int> labels, std::size_t classes) {
  const std::size_t n = scores.rows(), k = scores.cols();
  if (predicted.size() != n || labels.size() != n) throw ShapeError("prototypes: scores/predictions/labels disagree in length");
  std::vector<std::vector<double>> right(classes, std::vector<double>(k, 0.0));
  std::vector<std::vector<double>> wrong(classes, std::vector<double>(k, 0.0));
  InterventionPrototypes p;
  p.right_counts.assign(classes, 0);
  p.wrong_counts.assign(classes, 0);
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= classes) throw ConfigError("prototypes: label out of range");
    const auto cls = static_cast<std::size_t>(labels[i]);
    auto& acc = predicted[i] == labels[i] ? right[cls] : wrong[cls];
    auto& count = predicted[i] == labels[i] ? p.right_counts[cls] : p.wrong_counts[cls];
    for (std::size_t j = 0; j < k; ++j) acc[j] += scores(i, j);
    ++count;
  }
  p.delta.resize(classes);
  for (std::size_t c = 0; c < classes; ++c) {
    if (p.right_counts[c] == 0 || p.wrong_counts[c] == 0) continue;
    std::vector<double> d(k);
    const double nr = static_cast<double>(p.right_counts[c]);
    const double nw = static_cast<double>(p.wrong_counts[c]);
    for (std::size_t j = 0; j < k; ++j) d[j] = right[c][j] / nr - wrong[c][j] / nw;
    p.delta[c] = std::move(d);
  }
  return p;
}

InterventionPrototypes build_difference_prototypes(const GraphCbmModel& model, const EmbeddingDataset& data) {
  const ForwardOutput out = predict_dataset(model, data.images);
  return build_difference_prototypes(out.c, out.y_hat, data.labels, model.config().classes);
}

std::vector<double> lazy_intervene(std::span<const double> c, int true_class, const InterventionPrototypes& protos,
                                   bool* applied) {
  std::vector<double> out(c.begin(), c.end());
  const bool ok = true_class >= 0 && protos.available(static_cast<std::size_t>(true_class));
  if (applied) *applied = ok;
  if (!ok) return out;
  const auto& d = *protos.delta[static_cast<std::size_t>(true_class)];
  if (d.size() != c.size()) throw ShapeError("lazy_intervene: prototype length differs from k");
  for (std::size_t j = 0; j < out.size(); ++j) out[j] += d[j];
  return out;
}

LazyOutcome lazy_intervene_dataset(const GraphCbmModel& model, const EmbeddingDataset& data,
                                   const InterventionPrototypes& protos) {
  const ForwardOutput base = predict_dataset(model, data.images);
  Matrix edited = base.c;
  LazyOutcome r;
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (base.y_hat[i] == data.labels[i]) continue;
    bool applied = false;
    const auto row = lazy_intervene(base.c.row(i), data.labels[i], protos, &applied);
    if (!applied) {
      ++r.skipped_no_prototype;
      continue;
    }
    std::copy(row.begin(), row.end(), edited.row(i).begin());
    ++r.intervened;
  }
  r.accuracy_before = accuracy(base.y_hat, data.labels);
  r.accuracy_after = accuracy(predict_scores_dataset(model, edited).y_hat, data.labels);
  return r;
}

std::string to_string(Policy p) { return p == Policy::ucp ? "ucp" : "random"; }

Policy policy_from_string(const std::string& s) {
  if (s == "ucp") return Policy::ucp;
  if (s == "random") return Policy::random;
  throw ConfigError("unknown policy '" + s + "' (expected ucp or random)");
}

namespace {

std::size_t selection_size(std::size_t k, double ratio) {
  if (!(ratio >= 0.0 && ratio <= 1.0)) throw ConfigError("intervention ratio must be in [0, 1]");
  return static_cast<std::size_t>(std::lround(ratio * static_cast<double>(k)));
}

}  // namespace

std::vector<std::size_t> select_concepts_ucp(std::span<const double> c, double ratio) {
  const std::size_t count = selection_size(c.size(), ratio);
  std::vector<double> uncertainty(c.size());
  for (std::size_t j = 0; j < c.size(); ++j) uncertainty[j] = std::abs(1.0 / (1.0 + std::exp(-c[j])) - 0.5);
  std::vector<std::size_t> idx(c.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return uncertainty[a] < uncertainty[b]; });
  idx.resize(count);
  std::sort(idx.begin(), idx.end());
  return idx;
}

std::vector<std::size_t> select_concepts_random(std::size_t k, double ratio, std::mt19937_64& rng) {
  const std::size_t count = selection_size(k, ratio);
  std::vector<std::size_t> idx(k);
  std::iota(idx.begin(), idx.end(), 0);
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(count);
  std::sort(idx.begin(), idx.end());
  return idx;
}

std::vector<std::size_t> select_concepts(std::span<const double> c, double ratio, Policy policy,
                                         std::mt19937_64& rng) {
  return policy == Policy::ucp ? select_concepts_ucp(c, ratio) : select_concepts_random(c.size(), ratio, rng);
}

std::vector<double> intervene_supervised(std::span<const double> c, std::span<const double> annotations,
                                         std::span<const std::size_t> selected, double gamma) {
  if (annotations.size() != c.size()) throw ShapeError("intervene_supervised: annotations length differs from k");
  std::vector<double> out(c.begin(), c.end());
  for (std::size_t j : selected) {
    if (j >= c.size()) throw ConfigError("intervene_supervised: concept index out of range");
    const bool predicted_on = 1.0 / (1.0 + std::exp(-c[j])) > 0.5;
    const bool truth_on = annotations[j] > 0.5;
    if (predicted_on != truth_on) out[j] = truth_on ? gamma : -gamma;
  }
  return out;
}

std::vector<double> intervene_row(Mode mode, std::span<const double> c, int label, bool misclassified,
                                  std::span<const double> annotations, const InterventionPrototypes& protos,
                                  std::span<const std::size_t> selected, double gamma) {
  if (mode == Mode::concept_supervised) {
    if (annotations.empty()) throw ConfigError("supervised intervention needs concept annotations");
    return intervene_supervised(c, annotations, selected, gamma);
  }
  std::vector<double> out(c.begin(), c.end());
  if (!misclassified || label < 0 || !protos.available(static_cast<std::size_t>(label))) return out;
  const auto& d = *protos.delta[static_cast<std::size_t>(label)];
  for (std::size_t j : selected) {
    if (j >= c.size()) throw ConfigError("intervention: concept index out of range");
    out[j] += d[j];
  }
  return out;
}

std::vector<CurvePoint> intervention_curve(const GraphCbmModel& model, const EmbeddingDataset& data,
                                           std::span<const double> ratios, const CurveConfig& cfg,
                                           const EmbeddingDataset* prototype_data) {
  if (data.size() == 0) throw ConfigError("intervention_curve: empty dataset");
  const Mode mode = model.mode();
  if (mode == Mode::concept_supervised && !data.has_annotations()) {
    throw ConfigError("supervised intervention needs concept annotations");
  }
  const ForwardOutput base = predict_dataset(model, data.images);
  InterventionPrototypes protos;
  if (mode == Mode::label_free) {
    protos = prototype_data ? build_difference_prototypes(model, *prototype_data)
                            : build_difference_prototypes(base.c, base.y_hat, data.labels, model.config().classes);
  }
  std::vector<CurvePoint> curve;
  for (double ratio : ratios) {
    std::mt19937_64 rng(cfg.seed);
    Matrix edited = base.c;
    for (std::size_t i = 0; i < data.size(); ++i) {
      const auto selected = select_concepts(base.c.row(i), ratio, cfg.policy, rng);
      const std::span<const double> ann =
          data.has_annotations() ? data.annotations.row(i) : std::span<const double>{};
      const auto row = intervene_row(mode, base.c.row(i), data.labels[i], base.y_hat[i] != data.labels[i], ann,
                                     protos, selected, cfg.gamma);
      std::copy(row.begin(), row.end(), edited.row(i).begin());
    }
    curve.push_back({ratio, accuracy(predict_scores_dataset(model, edited).y_hat, data.labels)});
  }
  return curve;
}

}  // namespace gcbm
