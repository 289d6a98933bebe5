#include "gcbm/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <random>
#include <sstream>
#include <tuple>

#include <json.hpp>

#include "gcbm/container.hpp"

namespace gcbm {

using json = nlohmann::json;

// ---- salient subgraph ------------------------------------------------------

SalientResult salient_subgraph(const GraphCbmModel& model, const EmbeddingDataset& val, EdgeOrder order) {
  if (val.size() == 0) throw ConfigError("salient_subgraph: empty validation set");
  EdgeSet edges = extract_edges(model.graph());
  std::stable_sort(edges.begin(), edges.end(), [&](const Edge& a, const Edge& b) {
    return order == EdgeOrder::descending_weight ? a.weight > b.weight : a.weight < b.weight;
  });

  SalientResult r;
  r.pruned = model.clone();
  const Metrics before = evaluate(r.pruned, val);
  r.accuracy_before = before.label_accuracy;
  r.auc_before = before.concept_roc_auc;
  double current = before.label_accuracy;
  for (const Edge& e : edges) {
    GraphCbmModel candidate = r.pruned.clone();
    candidate.graph().remove_edge(e.layer, e.source, e.target);
    const double acc = evaluate(candidate, val).label_accuracy;
    if (acc >= current) {
      r.pruned = std::move(candidate);
      r.removed.push_back(e);
      current = acc;
    }
  }
  r.kept = extract_edges(r.pruned.graph());
  const Metrics after = evaluate(r.pruned, val);
  r.accuracy_after = after.label_accuracy;
  r.auc_after = after.concept_roc_auc;
  return r;
}

// ---- concept attacks -------------------------------------------------------

std::string to_string(AttackGroup g) {
  switch (g) {
    case AttackGroup::connected: return "connected";
    case AttackGroup::isolated: return "isolated";
    case AttackGroup::random: return "random";
  }
  return "random";
}

std::string to_string(AttackMode m) { return m == AttackMode::mask ? "mask" : "perturb"; }

AttackGroup attack_group_from_string(const std::string& s) {
  if (s == "connected") return AttackGroup::connected;
  if (s == "isolated") return AttackGroup::isolated;
  if (s == "random") return AttackGroup::random;
  throw ConfigError("unknown attack group '" + s + "'");
}

AttackMode attack_mode_from_string(const std::string& s) {
  if (s == "mask") return AttackMode::mask;
  if (s == "perturb") return AttackMode::perturb;
  throw ConfigError("unknown attack mode '" + s + "'");
}

std::vector<std::size_t> attack_group_members(const GraphCbmModel& model, AttackGroup group) {
  const std::size_t k = model.config().concepts;
  const auto degree = node_degrees(extract_edges(model.graph()), k);
  std::vector<std::size_t> out;
  for (std::size_t j = 0; j < k; ++j) {
    if (group == AttackGroup::random || (group == AttackGroup::connected) == (degree[j] >= 1)) out.push_back(j);
  }
  return out;
}

namespace {

void mean_std(std::span<const double> xs, double& mean, double& sd) {
  mean = 0.0;
  sd = 0.0;
  if (xs.empty()) return;
  mean = std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
  double ss = 0.0;
  for (double x : xs) ss += (x - mean) * (x - mean);
  sd = std::sqrt(ss / static_cast<double>(xs.size()));
}

}  // namespace

AttackReport attack_eval(const GraphCbmModel& model, const EmbeddingDataset& data, const AttackConfig& cfg) {
  if (data.size() == 0) throw ConfigError("attack_eval: empty dataset");
  if (cfg.trials == 0) throw ConfigError("attack_eval: trials must be > 0");
  const auto members = attack_group_members(model, cfg.group);
  if (members.size() < cfg.n) {
    throw ConfigError("attack group '" + to_string(cfg.group) + "' has " + std::to_string(members.size()) +
                      " concepts, fewer than n=" + std::to_string(cfg.n));
  }
  const ForwardOutput base = predict_dataset(model, data.images);
  AttackReport r;
  r.group = cfg.group;
  r.mode = cfg.mode;
  r.n_attacked = cfg.n;
  r.group_size = members.size();
  r.baseline_accuracy = accuracy(base.y_hat, data.labels);

  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> noise(0.0, cfg.noise_sigma);
  for (std::size_t t = 0; t < cfg.trials; ++t) {
    if (cfg.n == 0) {
      r.accuracies.push_back(r.baseline_accuracy);
      continue;
    }
    std::vector<std::size_t> pool = members;
    std::shuffle(pool.begin(), pool.end(), rng);
    pool.resize(cfg.n);
    Matrix attacked = base.c;
    for (std::size_t i = 0; i < attacked.rows(); ++i) {
      for (std::size_t j : pool) {
        if (cfg.mode == AttackMode::mask) {
          attacked(i, j) = 0.0;
        } else {
          attacked(i, j) += noise(rng);
        }
      }
    }
    r.accuracies.push_back(accuracy(predict_scores_dataset(model, attacked).y_hat, data.labels));
  }
  mean_std(r.accuracies, r.mean, r.std);
  return r;
}

// ---- beta sweep ------------------------------------------------------------

SweepReport beta_sweep(const TrainConfig& base, std::span<const double> betas, const EmbeddingDataset& data,
                       std::span<const std::uint64_t> seeds, const std::string& eval_split) {
  if (seeds.empty()) throw ConfigError("beta_sweep needs at least one seed");
  SweepReport report;
  report.seeds.assign(seeds.begin(), seeds.end());
  report.eval_split = data.has_split(eval_split) ? eval_split : "";
  const EmbeddingDataset eval = report.eval_split.empty() ? data : data.split(eval_split);
  for (double beta : betas) {
    SweepRow row;
    row.beta = beta;
    for (std::uint64_t seed : seeds) {
      TrainConfig cfg = base;
      cfg.beta = beta;
      cfg.seed = seed;
      const TrainResult tr = train(cfg, data);
      row.accuracies.push_back(evaluate(tr.best, eval).label_accuracy);
      row.edge_counts.push_back(union_pairs(extract_edges(tr.final_model.graph())).size());
    }
    mean_std(row.accuracies, row.accuracy_mean, row.accuracy_std);
    std::vector<double> edges(row.edge_counts.begin(), row.edge_counts.end());
    mean_std(edges, row.edges_mean, row.edges_std);
    report.rows.push_back(std::move(row));
  }
  return report;
}

std::string SweepReport::to_json() const {
  json rows_j = json::array();
  for (const auto& r : rows) {
    rows_j.push_back({{"beta", r.beta},
                      {"accuracies", r.accuracies},
                      {"edge_counts", r.edge_counts},
                      {"accuracy_mean", r.accuracy_mean},
                      {"accuracy_std", r.accuracy_std},
                      {"edges_mean", r.edges_mean},
                      {"edges_std", r.edges_std}});
  }
  return json{{"seeds", seeds}, {"eval_split", eval_split}, {"rows", rows_j}}.dump(2);
}

SweepReport SweepReport::from_json(const std::string& text) {
  SweepReport rep;
  try {
    const json j = json::parse(text);
    rep.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    rep.eval_split = j.at("eval_split").get<std::string>();
    for (const auto& r : j.at("rows")) {
      SweepRow row;
      row.beta = r.at("beta").get<double>();
      row.accuracies = r.at("accuracies").get<std::vector<double>>();
      row.edge_counts = r.at("edge_counts").get<std::vector<std::size_t>>();
      row.accuracy_mean = r.at("accuracy_mean").get<double>();
      row.accuracy_std = r.at("accuracy_std").get<double>();
      row.edges_mean = r.at("edges_mean").get<double>();
      row.edges_std = r.at("edges_std").get<double>();
      rep.rows.push_back(std::move(row));
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("invalid sweep report: ") + e.what());
  }
  return rep;
}

// ---- exports ---------------------------------------------------------------

GraphFormat graph_format_from_string(const std::string& s) {
  if (s == "json") return GraphFormat::json;
  if (s == "dot") return GraphFormat::dot;
  throw ConfigError("unknown graph format '" + s + "' (expected json or dot)");
}

namespace {

void check_names(const GraphCbmModel& model, const std::vector<std::string>& names) {
  if (names.size() != model.config().concepts) {
    throw ConfigError("graph export: " + std::to_string(names.size()) + " concept names for k=" +
                      std::to_string(model.config().concepts));
  }
}

EdgeSet sorted_edges(const GraphCbmModel& model) {
  EdgeSet edges = extract_edges(model.graph());
  std::sort(edges.begin(), edges.end(), [](const Edge& a, const Edge& b) {
    return std::tie(a.layer, a.source, a.target) < std::tie(b.layer, b.source, b.target);
  });
  return edges;
}

std::string dot_quote(const std::string& s) {
  std::string out = "\"";
  for (char ch : s) {
    if (ch == '"' || ch == '\\') out += '\\';
    out += ch;
  }
  return out + "\"";
}

void write_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  out << text;
  if (!out) throw FormatError("write failed: " + path.string());
}

}  // namespace

std::string graph_json(const GraphCbmModel& model, const std::vector<std::string>& concept_names) {
  check_names(model, concept_names);
  json nodes = json::array();
  for (std::size_t i = 0; i < concept_names.size(); ++i) nodes.push_back({{"id", i}, {"name", concept_names[i]}});
  json edges = json::array();
  for (const Edge& e : sorted_edges(model)) {
    edges.push_back({{"source", e.source}, {"target", e.target}, {"weight", e.weight}, {"layer", e.layer}});
  }
  return json{{"nodes", nodes}, {"edges", edges}}.dump(2) + "\n";
}

std::string graph_dot(const GraphCbmModel& model, const std::vector<std::string>& concept_names) {
  check_names(model, concept_names);
  std::ostringstream out;
  out << std::setprecision(17);
  out << "graph concepts {\n";
  for (std::size_t i = 0; i < concept_names.size(); ++i) {
    out << "  " << i << " [label=" << dot_quote(concept_names[i]) << "];\n";
  }
  for (const Edge& e : sorted_edges(model)) {
    out << "  " << e.source << " -- " << e.target << " [weight=" << e.weight << ", layer=" << e.layer << "];\n";
  }
  out << "}\n";
  return out.str();
}

void export_graph(const GraphCbmModel& model, const std::vector<std::string>& concept_names,
                  const std::filesystem::path& path, GraphFormat format) {
  write_file(path, format == GraphFormat::json ? graph_json(model, concept_names) : graph_dot(model, concept_names));
}

ImportedGraph import_graph_json(const std::string& text) {
  ImportedGraph g;
  try {
    const json j = json::parse(text);
    const auto& nodes = j.at("nodes");
    g.concept_names.resize(nodes.size());
    for (const auto& n : nodes) {
      const auto id = n.at("id").get<std::size_t>();
      if (id >= nodes.size()) throw FormatError("graph json: node id " + std::to_string(id) + " out of range");
      g.concept_names[id] = n.at("name").get<std::string>();
    }
    for (const auto& e : j.at("edges")) {
      Edge edge{e.at("source").get<std::size_t>(), e.at("target").get<std::size_t>(), e.at("weight").get<double>(),
                e.at("layer").get<std::size_t>()};
      if (edge.source >= edge.target || edge.target >= nodes.size()) {
        throw FormatError("graph json: edge (" + std::to_string(edge.source) + ", " + std::to_string(edge.target) +
                          ") is not a valid source < target pair");
      }
      g.edges.push_back(edge);
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("invalid graph json: ") + e.what());
  }
  return g;
}

Matrix activation_matrix(const GraphCbmModel& model, const EmbeddingDataset& data) {
  const ForwardOutput out = predict_dataset(model, data.images);
  const std::size_t k = model.config().concepts;
  Matrix m(data.size(), k + 1);
  for (std::size_t i = 0; i < data.size(); ++i) {
    std::copy_n(out.c_tilde.row(i).begin(), k, m.row(i).begin());
    m(i, k) = data.labels[i];
  }
  return m;
}

void export_activations(const GraphCbmModel& model, const EmbeddingDataset& data, const std::filesystem::path& path) {
  save_matrix(path, activation_matrix(model, data));
}

}  // namespace gcbm
