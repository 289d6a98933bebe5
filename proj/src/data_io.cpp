#include "gcbm/data_io.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <optional>
#include <random>
#include <set>

#include <json.hpp>

#include "gcbm/container.hpp"

namespace gcbm {

using json = nlohmann::json;
namespace fs = std::filesystem;

// ---- EmbeddingDataset ------------------------------------------------------

EmbeddingDataset EmbeddingDataset::select(const std::vector<std::size_t>& indices) const {
  EmbeddingDataset out;
  out.mode = mode;
  out.classes = classes;
  out.concepts = concepts;
  out.concept_names = concept_names;
  out.images = Matrix(indices.size(), dim());
  if (has_annotations()) out.annotations = Matrix(indices.size(), annotations.cols());
  out.labels.reserve(indices.size());
  for (std::size_t r = 0; r < indices.size(); ++r) {
    const std::size_t i = indices[r];
    if (i >= size()) throw ConfigError("sample index " + std::to_string(i) + " out of range");
    std::copy_n(images.row(i).begin(), dim(), out.images.row(r).begin());
    if (has_annotations()) {
      std::copy_n(annotations.row(i).begin(), annotations.cols(), out.annotations.row(r).begin());
    }
    out.labels.push_back(labels[i]);
  }
  return out;
}

EmbeddingDataset EmbeddingDataset::split(const std::string& name) const {
  auto it = splits.find(name);
  if (it == splits.end()) throw ConfigError("dataset has no split '" + name + "'");
  return select(it->second);
}

void EmbeddingDataset::validate() const {
  const std::size_t n = size();
  const std::size_t k = concept_count();
  if (labels.size() != n) {
    throw FormatError("labels: " + std::to_string(labels.size()) + " labels for " + std::to_string(n) + " samples");
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= classes) {
      throw FormatError("labels: label " + std::to_string(y) + " outside [0, " + std::to_string(classes) + ")");
    }
  }
  if (has_concepts() && (concepts.rows() != k || concepts.cols() != dim())) {
    throw FormatError("concepts: shape " + shape_str(concepts) + " does not match k=" + std::to_string(k) +
                      ", d=" + std::to_string(dim()));
  }
  if (has_annotations()) {
    if (annotations.rows() != n || annotations.cols() != k) {
      throw FormatError("annotations: shape " + shape_str(annotations) + " does not match n=" +
                        std::to_string(n) + ", k=" + std::to_string(k));
    }
    for (double v : annotations.data()) {
      if (v != 0.0 && v != 1.0) throw FormatError("annotations: non-binary entry");
    }
  }
  if (!images.all_finite()) throw FormatError("images: non-finite entry");
  for (const auto& [name, idx] : splits) {
    for (std::size_t i : idx) {
      if (i >= n) throw FormatError("split '" + name + "': index " + std::to_string(i) + " out of range");
    }
  }
}

void EmbeddingDataset::require_mode(Mode m) const {
  if (m == Mode::label_free && !has_concepts()) {
    throw ConfigError("label-free mode needs concept embeddings, dataset has none");
  }
  if (m == Mode::concept_supervised && !has_annotations()) {
    throw ConfigError("concept-supervised mode needs concept annotations, dataset has none");
  }
}

namespace {

Matrix labels_matrix(const std::vector<int>& labels) {
  Matrix m(labels.size(), 1);
  for (std::size_t i = 0; i < labels.size(); ++i) m(i, 0) = labels[i];
  return m;
}

void check_shape(const Matrix& m, std::size_t rows, std::size_t cols, const std::string& what) {
  if (m.rows() != rows || m.cols() != cols) {
    throw FormatError(what + ": shape " + shape_str(m) + " does not match meta (" + std::to_string(rows) +
                      "x" + std::to_string(cols) + ")");
  }
}

}  // namespace

void save_dataset(const fs::path& dir, const EmbeddingDataset& data) {
  data.validate();
  fs::create_directories(dir);
  json files = {{"images", "images.gcbm"}, {"labels", "labels.gcbm"}};
  save_matrix(dir / "images.gcbm", data.images);
  save_matrix(dir / "labels.gcbm", labels_matrix(data.labels));
  if (data.has_concepts()) {
    files["concepts"] = "concepts.gcbm";
    save_matrix(dir / "concepts.gcbm", data.concepts);
  }
  if (data.has_annotations()) {
    files["annotations"] = "annotations.gcbm";
    save_matrix(dir / "annotations.gcbm", data.annotations);
  }
  json splits = json::object();
  for (const auto& [name, idx] : data.splits) splits[name] = idx;
  json meta = {{"n", data.size()},
               {"d", data.dim()},
               {"k", data.concept_count()},
               {"m", data.classes},
               {"mode", to_string(data.mode)},
               {"files", files},
               {"concept_names", data.concept_names},
               {"splits", splits}};
  std::ofstream out(dir / "meta.json", std::ios::trunc);
  if (!out) throw FormatError("cannot write " + (dir / "meta.json").string());
  out << meta.dump(2) << "\n";
}

EmbeddingDataset load_dataset(const fs::path& dir) {
  const fs::path meta_path = dir / "meta.json";
  std::ifstream in(meta_path);
  if (!in) throw FormatError("cannot open " + meta_path.string());
  json meta;
  try {
    meta = json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError(meta_path.string() + ": " + e.what());
  }

  EmbeddingDataset ds;
  std::size_t n = 0, d = 0, k = 0;
  json files;
  try {
    n = meta.at("n").get<std::size_t>();
    d = meta.at("d").get<std::size_t>();
    k = meta.at("k").get<std::size_t>();
    ds.classes = meta.at("m").get<std::size_t>();
    ds.mode = mode_from_string(meta.at("mode").get<std::string>());
    files = meta.at("files");
    if (meta.contains("concept_names") && !meta["concept_names"].empty()) {
      ds.concept_names = meta["concept_names"].get<std::vector<std::string>>();
    }
    if (meta.contains("splits")) {
      for (const auto& [name, idx] : meta["splits"].items()) {
        ds.splits[name] = idx.get<std::vector<std::size_t>>();
      }
    }
  } catch (const json::exception& e) {
    throw FormatError(meta_path.string() + ": invalid meta: " + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(meta_path.string() + ": " + e.what());
  }
  if (ds.concept_names.empty()) {
    for (std::size_t i = 0; i < k; ++i) ds.concept_names.push_back("c" + std::to_string(i));
  } else if (ds.concept_names.size() != k) {
    throw FormatError(meta_path.string() + ": meta declares k=" + std::to_string(k) + " but lists " +
                      std::to_string(ds.concept_names.size()) + " concept names");
  }

  auto file_of = [&](const char* key) { return dir / files.at(key).get<std::string>(); };
  try {
    ds.images = load_matrix(file_of("images"));
    check_shape(ds.images, n, d, "images");
    const Matrix labels = load_matrix(file_of("labels"));
    check_shape(labels, n, 1, "labels");
    ds.labels.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      const double v = labels(i, 0);
      if (v != std::floor(v)) throw FormatError("labels: non-integer label");
      ds.labels[i] = static_cast<int>(v);
    }
    if (files.contains("concepts")) {
      ds.concepts = load_matrix(file_of("concepts"));
      check_shape(ds.concepts, k, d, "concepts");
    }
    if (files.contains("annotations")) {
      ds.annotations = load_matrix(file_of("annotations"));
      check_shape(ds.annotations, n, k, "annotations");
    }
  } catch (const json::exception& e) {
    throw FormatError(meta_path.string() + ": invalid files entry: " + e.what());
  }
  ds.validate();
  ds.require_mode(ds.mode);
  return ds;
}

// ---- synthetic generator ---------------------------------------------------

void SyntheticSpec::validate() const {
  if (concepts < 2 || dim == 0 || classes < 2) throw ConfigError("synthetic spec: need k >= 2, d >= 1, m >= 2");
  if (n_train < 2) throw ConfigError("synthetic spec: n_train must be >= 2");
  if (!(density > 0.0 && density < 1.0)) throw ConfigError("synthetic spec: density must be in (0, 1)");
  const double pairs = static_cast<double>(concepts * (concepts - 1)) / 2.0;
  if (density * pairs < 1.0) throw ConfigError("synthetic spec: density * k(k-1)/2 must be >= 1");
  if (!(noise >= 0.0)) throw ConfigError("synthetic spec: noise must be >= 0");
  if (!(strength >= 0.0)) throw ConfigError("synthetic spec: strength must be >= 0");
}

namespace {

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

std::optional<SyntheticData> try_generate(const SyntheticSpec& spec, std::uint64_t seed) {
  const std::size_t k = spec.concepts, d = spec.dim, m = spec.classes;
  const std::size_t n = spec.n_train + spec.n_val + spec.n_test;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);

  SyntheticData out;
  out.seed_used = seed;
  std::vector<std::vector<std::size_t>> neighbors(k);
  while (out.planted.empty()) {
    for (std::size_t i = 0; i < k; ++i)
      for (std::size_t j = i + 1; j < k; ++j)
        if (unif(rng) < spec.density) out.planted.push_back({i, j, 1.0, 0});
  }
  for (const auto& e : out.planted) {
    neighbors[e.source].push_back(e.target);
    neighbors[e.target].push_back(e.source);
  }

  Matrix concepts(k, d);
  for (std::size_t i = 0; i < k; ++i) {
    double ss = 0.0;
    for (double& x : concepts.row(i)) {
      x = gauss(rng);
      ss += x * x;
    }
    const double nrm = std::sqrt(ss);
    for (double& x : concepts.row(i)) x /= nrm;
  }

  std::mt19937_64 label_rng(spec.label_seed);
  std::normal_distribution<double> label_gauss(0.0, 1.0);
  Matrix rule(m, k);
  for (double& x : rule.data()) x = label_gauss(label_rng);

  Matrix states(n, k);
  Matrix images(n, d);
  std::vector<double> s(k);
  for (std::size_t r = 0; r < n; ++r) {
    for (double& x : s) x = unif(rng) < 0.5 ? 1.0 : 0.0;
    for (std::size_t round = 0; round < spec.gibbs_rounds; ++round) {
      for (std::size_t i = 0; i < k; ++i) {
        // Spins x = 2s - 1; P(x_i = +1) = sigmoid(2 (h + J sum_j x_j)).
        double local = spec.field;
        for (std::size_t j : neighbors[i]) local += spec.strength * (2.0 * s[j] - 1.0);
        s[i] = unif(rng) < sigmoid(2.0 * local) ? 1.0 : 0.0;
      }
    }
    // Every sample observes at least one concept.
    if (std::all_of(s.begin(), s.end(), [](double x) { return x == 0.0; })) {
      s[std::uniform_int_distribution<std::size_t>(0, k - 1)(rng)] = 1.0;
    }
    std::copy(s.begin(), s.end(), states.row(r).begin());

    std::vector<double> emb(d, 0.0);
    for (std::size_t i = 0; i < k; ++i)
      if (s[i] > 0.0)
        for (std::size_t j = 0; j < d; ++j) emb[j] += concepts(i, j);
    double ss = 0.0;
    for (double x : emb) ss += x * x;
    const double nrm = std::sqrt(ss);
    for (std::size_t j = 0; j < d; ++j) {
      images(r, j) = (nrm > 0.0 ? emb[j] / nrm : 0.0) + spec.noise * gauss(rng);
    }

  }

  // Class scores are standardized over the sample so every class of the
  // fixed linear rule is reachable.
  const Matrix scores = matmul(states, rule.transposed());
  std::vector<double> mu(m, 0.0), sd(m, 0.0);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < m; ++c) mu[c] += scores(r, c) / static_cast<double>(n);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < m; ++c) sd[c] += (scores(r, c) - mu[c]) * (scores(r, c) - mu[c]);
  for (double& v : sd) v = std::sqrt(v / static_cast<double>(n)) + 1e-12;
  std::vector<int> labels(n);
  for (std::size_t r = 0; r < n; ++r) {
    std::size_t best = 0;
    double best_score = -1e300;
    for (std::size_t c = 0; c < m; ++c) {
      const double z = (scores(r, c) - mu[c]) / sd[c];
      if (z > best_score) {
        best_score = z;
        best = c;
      }
    }
    labels[r] = static_cast<int>(best);
  }

  std::vector<std::size_t> counts(m, 0);
  for (std::size_t r = 0; r < spec.n_train; ++r) ++counts[static_cast<std::size_t>(labels[r])];
  if (std::any_of(counts.begin(), counts.end(), [](std::size_t c) { return c == 0; })) return std::nullopt;

  EmbeddingDataset& ds = out.data;
  ds.mode = spec.mode;
  ds.images = std::move(images);
  ds.labels = std::move(labels);
  ds.classes = m;
  ds.concepts = std::move(concepts);
  ds.annotations = std::move(states);
  for (std::size_t i = 0; i < k; ++i) ds.concept_names.push_back("c" + std::to_string(i));
  auto range = [](std::size_t begin, std::size_t count) {
    std::vector<std::size_t> idx(count);
    std::iota(idx.begin(), idx.end(), begin);
    return idx;
  };
  ds.splits["train"] = range(0, spec.n_train);
  ds.splits["val"] = range(spec.n_train, spec.n_val);
  ds.splits["test"] = range(spec.n_train + spec.n_val, spec.n_test);
  return out;
}

}  // namespace

SyntheticData generate_synthetic(const SyntheticSpec& spec, std::uint64_t seed) {
  spec.validate();
  for (std::uint64_t attempt = 0; attempt < 10; ++attempt) {
    if (auto result = try_generate(spec, seed + attempt)) {
      result->data.validate();
      return std::move(*result);
    }
  }
  throw ConfigError("synthetic spec is degenerate: a class stayed empty after 10 seeds starting at " +
                    std::to_string(seed));
}

std::string synthetic_spec_json(const SyntheticSpec& s) {
  return json{{"concepts", s.concepts},     {"dim", s.dim},
              {"classes", s.classes},       {"n_train", s.n_train},
              {"n_val", s.n_val},           {"n_test", s.n_test},
              {"density", s.density},       {"strength", s.strength},
              {"field", s.field},           {"gibbs_rounds", s.gibbs_rounds},
              {"noise", s.noise},           {"label_seed", s.label_seed},
              {"mode", to_string(s.mode)}}
      .dump(2);
}

SyntheticSpec synthetic_spec_from_json(const std::string& text) {
  SyntheticSpec s;
  try {
    const json j = json::parse(text);
    s.concepts = j.value("concepts", s.concepts);
    s.dim = j.value("dim", s.dim);
    s.classes = j.value("classes", s.classes);
    s.n_train = j.value("n_train", s.n_train);
    s.n_val = j.value("n_val", s.n_val);
    s.n_test = j.value("n_test", s.n_test);
    s.density = j.value("density", s.density);
    s.strength = j.value("strength", s.strength);
    s.field = j.value("field", s.field);
    s.gibbs_rounds = j.value("gibbs_rounds", s.gibbs_rounds);
    s.noise = j.value("noise", s.noise);
    s.label_seed = j.value("label_seed", s.label_seed);
    if (j.contains("mode")) s.mode = mode_from_string(j["mode"].get<std::string>());
  } catch (const json::exception& e) {
    throw ConfigError(std::string("invalid synthetic spec: ") + e.what());
  }
  s.validate();
  return s;
}

// ---- recovery metrics ------------------------------------------------------

RecoveryMetrics graph_recovery_metrics(const EdgeSet& learned, const EdgeSet& planted, std::size_t concepts) {
  const auto lp = union_pairs(learned);
  const auto pp = union_pairs(planted);
  for (const auto& [i, j] : lp)
    if (j >= concepts) throw ConfigError("learned edge outside the concept range");
  for (const auto& [i, j] : pp)
    if (j >= concepts) throw ConfigError("planted edge outside the concept range");
  std::vector<std::pair<std::size_t, std::size_t>> common;
  std::set_intersection(lp.begin(), lp.end(), pp.begin(), pp.end(), std::back_inserter(common));

  RecoveryMetrics r;
  r.learned_edges = lp.size();
  r.planted_edges = pp.size();
  const double tp = static_cast<double>(common.size());
  r.precision = lp.empty() ? 0.0 : tp / static_cast<double>(lp.size());
  r.recall = pp.empty() ? 0.0 : tp / static_cast<double>(pp.size());
  r.f1 = (r.precision + r.recall) > 0.0 ? 2.0 * r.precision * r.recall / (r.precision + r.recall) : 0.0;
  // F1 = 2 TP / (|L| + |P|) with both sizes fixed, so E[F1] = 2 E[TP] / (|L| + |P|)
  // where E[TP] = |L| |P| / N for a uniformly random |L|-edge graph.
  const double total_pairs = static_cast<double>(concepts) * static_cast<double>(concepts - 1) / 2.0;
  const double denom = static_cast<double>(lp.size() + pp.size());
  if (denom > 0.0 && total_pairs > 0.0) {
    const double expected_tp = static_cast<double>(lp.size()) * static_cast<double>(pp.size()) / total_pairs;
    r.random_baseline_f1 = 2.0 * expected_tp / denom;
  }
  return r;
}

double pearson(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.empty()) throw ShapeError("pearson: length mismatch or empty input");
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

}  // namespace gcbm
