#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <random>

#include "gcbm/analysis.hpp"
#include "gcbm/container.hpp"
#include "gcbm/error.hpp"
#include "support.hpp"

using namespace gcbm;
using gcbm::testing::random_matrix;
namespace fs = std::filesystem;

namespace {

// Label-free model with z_T = I on k = d concepts and a linear head whose
// class-1 logit reads concept 1 only. Class 0 carries a tiny bias so a zero
// class-1 logit predicts class 0.
GraphCbmModel hand_model(std::size_t k, std::size_t layers) {
  ModelConfig c;
  c.mode = Mode::label_free;
  c.concepts = k;
  c.dim = k;
  c.classes = 2;
  c.layers = layers;
  c.hidden = 0;
  Matrix eye(k, k);
  for (std::size_t i = 0; i < k; ++i) eye(i, i) = 1.0;
  GraphCbmModel m(c, eye);
  for (std::size_t l = 0; l < layers; ++l) m.graph().set_adjacency(l, Matrix(k, k));
  Matrix w(k, 2);
  w(1, 1) = 1.0;
  m.head().weight(0).mutable_value() = w;
  m.head().bias(0).mutable_value() = Matrix::from_rows({{1e-3, 0.0}});
  return m;
}

Matrix single_edge(std::size_t k, std::size_t i, std::size_t j, double w) {
  Matrix a(k, k);
  a(i, j) = a(j, i) = w;
  return a;
}

// Concept 0 holds +-1 and decides the label; concept 1 is always zero, so
// only an edge 0-1 lets the head see the label.
EmbeddingDataset signed_dataset(std::size_t k, std::size_t n) {
  EmbeddingDataset d;
  d.mode = Mode::label_free;
  d.images = Matrix(n, k);
  d.classes = 2;
  d.concepts = Matrix(k, k);
  for (std::size_t i = 0; i < k; ++i) {
    d.concepts(i, i) = 1.0;
    d.concept_names.push_back("n" + std::to_string(i));
  }
  for (std::size_t s = 0; s < n; ++s) {
    const bool pos = s % 2 == 1;
    d.images(s, 0) = pos ? 1.0 : -1.0;
    d.labels.push_back(pos ? 1 : 0);
  }
  return d;
}

SyntheticData synthetic(Mode mode, std::uint64_t seed) {
  SyntheticSpec s;
  s.concepts = 10;
  s.dim = 8;
  s.classes = 3;
  s.n_train = 300;
  s.n_val = 100;
  s.n_test = 100;
  s.mode = mode;
  return generate_synthetic(s, seed);
}

TrainConfig quick_config(Mode mode) {
  TrainConfig c;
  c.mode = mode;
  c.epochs = 5;
  c.batch_size = 32;
  c.lr = 1e-2;
  c.hidden = 8;
  c.layers = 2;
  c.beta = 0.01;
  return c;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

}  // namespace

TEST_CASE("salient pruning keeps an edge whose deletion hurts") {
  GraphCbmModel m = hand_model(2, 1);
  m.graph().set_adjacency(0, single_edge(2, 0, 1, 1.0));
  const EmbeddingDataset val = signed_dataset(2, 20);
  const SalientResult r = salient_subgraph(m, val);
  CHECK(r.accuracy_before == 1.0);
  CHECK(r.accuracy_after == 1.0);
  CHECK(r.removed.empty());
  REQUIRE(r.kept.size() == 1);
  CHECK(r.kept[0] == Edge{0, 1, 1.0, 0});
  CHECK_FALSE(r.auc_before.has_value());

  GraphCbmModel bare = hand_model(2, 1);
  CHECK(evaluate(bare, val).label_accuracy == 0.5);
}

TEST_CASE("salient pruning drops one of two redundant copies") {
  GraphCbmModel m = hand_model(2, 2);
  m.graph().set_adjacency(0, single_edge(2, 0, 1, 1.0));
  m.graph().set_adjacency(1, single_edge(2, 0, 1, 1.0));
  const EmbeddingDataset val = signed_dataset(2, 20);
  const SalientResult r = salient_subgraph(m, val);
  CHECK(r.accuracy_before == 1.0);
  CHECK(r.accuracy_after == 1.0);
  CHECK(r.removed.size() == 1);
  CHECK(r.kept.size() == 1);
  CHECK(extract_edges(r.pruned.graph()) == r.kept);
  CHECK(evaluate(r.pruned, val).label_accuracy == 1.0);
  // The input model is untouched.
  CHECK(extract_edges(m.graph()).size() == 2);
}

TEST_CASE("salient pruning on trained models") {
  for (Mode mode : {Mode::label_free, Mode::concept_supervised}) {
    CAPTURE(to_string(mode));
    const SyntheticData syn = synthetic(mode, 1);
    TrainConfig c = quick_config(mode);
    c.beta = 0;
    c.graph_init_scale = 0.5;
    const GraphCbmModel m = train(c, syn.data).best;
    const EmbeddingDataset val = syn.data.split("val");
    for (EdgeOrder order : {EdgeOrder::descending_weight, EdgeOrder::ascending_weight}) {
      const SalientResult r = salient_subgraph(m, val, order);
      CHECK(r.accuracy_after >= r.accuracy_before);
      CHECK(r.accuracy_before == evaluate(m, val).label_accuracy);
      CHECK(r.accuracy_after == evaluate(r.pruned, val).label_accuracy);
      CHECK(r.kept.size() + r.removed.size() == extract_edges(m.graph()).size());
      CHECK(r.auc_before.has_value() == (mode == Mode::concept_supervised));
    }
  }
}

TEST_CASE("attack groups and degenerate attacks") {
  GraphCbmModel m = hand_model(3, 1);
  m.graph().set_adjacency(0, single_edge(3, 0, 1, 1.0));
  CHECK(attack_group_members(m, AttackGroup::connected) == std::vector<std::size_t>{0, 1});
  CHECK(attack_group_members(m, AttackGroup::isolated) == std::vector<std::size_t>{2});
  CHECK(attack_group_members(m, AttackGroup::random) == std::vector<std::size_t>{0, 1, 2});

  const EmbeddingDataset data = signed_dataset(3, 30);
  AttackConfig cfg;
  cfg.n = 0;
  cfg.trials = 3;
  for (AttackMode mode : {AttackMode::mask, AttackMode::perturb}) {
    cfg.mode = mode;
    const AttackReport r = attack_eval(m, data, cfg);
    CHECK(r.baseline_accuracy == evaluate(m, data).label_accuracy);
    for (double a : r.accuracies) CHECK(a == r.baseline_accuracy);
    CHECK(r.std == 0.0);
  }

  cfg.mode = AttackMode::mask;
  cfg.group = AttackGroup::isolated;
  cfg.n = 2;
  CHECK_THROWS_AS(attack_eval(m, data, cfg), ConfigError);

  // Masking the only label-bearing concept leaves the class-0 bias.
  cfg.group = AttackGroup::connected;
  cfg.n = 2;
  const AttackReport all = attack_eval(m, data, cfg);
  CHECK(all.n_attacked == 2);
  CHECK(all.group_size == 2);
  CHECK(all.mean == 0.5);
}

TEST_CASE("masking every concept gives the constant-input predictor") {
  const SyntheticData syn = synthetic(Mode::label_free, 2);
  const GraphCbmModel m = train(quick_config(Mode::label_free), syn.data).best;
  const EmbeddingDataset test = syn.data.split("test");
  const int constant = m.predict_from_scores(Matrix(1, 10)).y_hat[0];
  double expected = 0;
  for (int y : test.labels) expected += y == constant;
  expected /= double(test.size());
  AttackConfig cfg;
  cfg.n = 10;
  cfg.trials = 4;
  const AttackReport r = attack_eval(m, test, cfg);
  for (double a : r.accuracies) CHECK(a == doctest::Approx(expected).epsilon(1e-12));

  cfg.mode = AttackMode::perturb;
  cfg.n = 3;
  cfg.seed = 5;
  const AttackReport p1 = attack_eval(m, test, cfg), p2 = attack_eval(m, test, cfg);
  CHECK(p1.accuracies == p2.accuracies);
  CHECK(p1.accuracies.size() == 4);
  CHECK(attack_group_from_string(to_string(AttackGroup::isolated)) == AttackGroup::isolated);
  CHECK(attack_mode_from_string(to_string(AttackMode::perturb)) == AttackMode::perturb);
  CHECK_THROWS_AS(attack_group_from_string("lonely"), ConfigError);
}

TEST_CASE("beta sweep") {
  const SyntheticData syn = synthetic(Mode::label_free, 3);
  const TrainConfig base = quick_config(Mode::label_free);
  const std::vector<double> one_beta{0.2};
  const std::vector<std::uint64_t> one_seed{4};
  const SweepReport s = beta_sweep(base, one_beta, syn.data, one_seed);
  REQUIRE(s.rows.size() == 1);
  TrainConfig c = base;
  c.beta = 0.2;
  c.seed = 4;
  const TrainResult r = train(c, syn.data);
  CHECK(s.rows[0].accuracies == std::vector<double>{evaluate(r.best, syn.data.split("test")).label_accuracy});
  CHECK(s.rows[0].edge_counts == std::vector<std::size_t>{union_pairs(extract_edges(r.final_model.graph())).size()});
  CHECK(s.rows[0].accuracy_std == 0.0);
  CHECK(s.eval_split == "test");

  const std::vector<double> betas{0.0, 1.0};
  const std::vector<std::uint64_t> seeds{0, 1};
  const SweepReport two = beta_sweep(base, betas, syn.data, seeds, "val");
  CHECK(two.rows.size() == 2);
  CHECK(two.rows[1].accuracies.size() == 2);
  CHECK(two.rows[0].edges_mean ==
        doctest::Approx((double(two.rows[0].edge_counts[0]) + double(two.rows[0].edge_counts[1])) / 2));
  const SweepReport back = SweepReport::from_json(two.to_json());
  CHECK(back == two);
  CHECK(back.to_json() == two.to_json());
  CHECK_THROWS_AS(SweepReport::from_json("{}"), FormatError);
}

TEST_CASE("graph JSON export") {
  const std::vector<std::string> names{"wing", "beak"};
  GraphCbmModel empty = hand_model(2, 1);
  const auto e = nlohmann::json::parse(graph_json(empty, names));
  CHECK(e["edges"].is_array());
  CHECK(e["edges"].empty());
  REQUIRE(e["nodes"].size() == 2);
  CHECK(e["nodes"][1]["id"] == 1);
  CHECK(e["nodes"][1]["name"] == "beak");

  GraphCbmModel one = hand_model(2, 1);
  one.graph().set_adjacency(0, single_edge(2, 0, 1, 0.3));
  const std::string text = graph_json(one, names);
  const auto j = nlohmann::json::parse(text);
  REQUIRE(j["edges"].size() == 1);
  CHECK(j["edges"][0]["source"] == 0);
  CHECK(j["edges"][0]["target"] == 1);
  CHECK(j["edges"][0]["weight"].get<double>() == one.graph().adjacency_value(0)(0, 1));
  CHECK(j["edges"][0]["layer"] == 0);
  CHECK(graph_json(one, names) == text);

  const ImportedGraph back = import_graph_json(text);
  CHECK(back.concept_names == names);
  CHECK(back.edges == extract_edges(one.graph()));
  CHECK_THROWS_AS(graph_json(one, {"only"}), ConfigError);
  CHECK_THROWS_AS(import_graph_json("{\"nodes\": 1}"), FormatError);
}

TEST_CASE("graph round trip on a trained model") {
  const SyntheticData syn = synthetic(Mode::label_free, 4);
  TrainConfig c = quick_config(Mode::label_free);
  c.beta = 0;
  c.graph_init_scale = 0.5;
  const GraphCbmModel m = train(c, syn.data).final_model;
  const EdgeSet edges = extract_edges(m.graph());
  REQUIRE_FALSE(edges.empty());
  const fs::path dir = fs::temp_directory_path() / "gcbm_test_export";
  fs::remove_all(dir);
  fs::create_directories(dir);
  export_graph(m, syn.data.concept_names, dir / "g.json", GraphFormat::json);
  CHECK(read_file(dir / "g.json") == graph_json(m, syn.data.concept_names));
  CHECK(import_graph_json(read_file(dir / "g.json")).edges == edges);

  export_graph(m, syn.data.concept_names, dir / "g.dot", GraphFormat::dot);
  const std::string dot = read_file(dir / "g.dot");
  CHECK(dot == graph_dot(m, syn.data.concept_names));
  CHECK(dot.rfind("graph ", 0) == 0);
  std::size_t lines = 0;
  for (std::size_t p = dot.find(" -- "); p != std::string::npos; p = dot.find(" -- ", p + 1)) ++lines;
  CHECK(lines == edges.size());
  CHECK(graph_format_from_string("dot") == GraphFormat::dot);
  CHECK_THROWS_AS(graph_format_from_string("png"), ConfigError);
  CHECK_THROWS_AS(export_graph(m, syn.data.concept_names, dir / "missing" / "g.json", GraphFormat::json),
                  FormatError);
  fs::remove_all(dir);
}

TEST_CASE("activation export") {
  const fs::path dir = fs::temp_directory_path() / "gcbm_test_activations";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const SyntheticData syn = synthetic(Mode::label_free, 5);
  TrainConfig c = quick_config(Mode::label_free);
  c.ablate_graph = true;
  c.layers = 1;
  const GraphCbmModel m = train(c, syn.data).best;
  const EmbeddingDataset test = syn.data.split("test");
  export_activations(m, test, dir / "a.gcbm");
  const Matrix a = load_matrix(dir / "a.gcbm");
  CHECK(a == activation_matrix(m, test));
  REQUIRE(a.rows() == test.size());
  REQUIRE(a.cols() == 11);
  const Matrix scores = m.initial_scores(test.images);
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < 10; ++j) CHECK(a(i, j) == std::tanh(scores(i, j)));
    CHECK(a(i, 10) == double(test.labels[i]));
  }
  const EmbeddingDataset single = test.select({3});
  export_activations(m, single, dir / "one.gcbm");
  CHECK(load_matrix(dir / "one.gcbm").rows() == 1);
  fs::remove_all(dir);
}
