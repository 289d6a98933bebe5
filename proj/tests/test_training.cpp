#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "gcbm/error.hpp"
#include "gcbm/training.hpp"
#include "support.hpp"

using namespace gcbm;
using gcbm::testing::random_matrix;
namespace fs = std::filesystem;

namespace {

// Labels are the argmax of a fixed linear map of z_v, so a linear head over
// c = z_v z_T^T separates them whenever z_T has full column rank. z_T is
// scaled down so tanh stays near its linear range.
EmbeddingDataset separable_dataset(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  EmbeddingDataset d;
  d.mode = Mode::label_free;
  d.images = random_matrix(n, 4, rng);
  d.concepts = random_matrix(8, 4, rng);
  for (double& v : d.concepts.data()) v *= 0.25;
  d.classes = 3;
  const Matrix w = random_matrix(4, 3, rng);
  d.labels = argmax_rows(matmul(d.images, w));
  for (std::size_t i = 0; i < 8; ++i) d.concept_names.push_back("c" + std::to_string(i));
  for (std::size_t i = 0; i < n; ++i) d.splits[i % 5 == 0 ? "val" : "train"].push_back(i);
  return d;
}

TrainConfig quick_config() {
  TrainConfig c;
  c.epochs = 4;
  c.batch_size = 32;
  c.lr = 1e-2;
  c.hidden = 8;
  c.layers = 2;
  c.seed = 3;
  return c;
}

SyntheticData small_synthetic(Mode mode, std::uint64_t seed) {
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

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

}  // namespace

TEST_CASE("roc_auc") {
  const std::vector<double> s{0.1, 0.4, 0.35, 0.8};
  const std::vector<int> y{0, 0, 1, 1};
  CHECK(roc_auc(s, y) == doctest::Approx(0.75));
  CHECK(roc_auc(std::vector<double>{1, 1, 1, 1}, y) == doctest::Approx(0.5));
  CHECK(roc_auc(std::vector<double>{0, 1, 2, 3}, y) == 1.0);
  CHECK(roc_auc(std::vector<double>{3, 2, 1, 0}, y) == 0.0);
  // One positive tied with one negative contributes 1/2.
  CHECK(roc_auc(std::vector<double>{0.2, 0.5, 0.5}, std::vector<int>{0, 0, 1}) == doctest::Approx(0.75));
  CHECK_THROWS_AS(roc_auc(std::vector<double>{1, 2}, std::vector<int>{1, 1}), ConfigError);
  CHECK_THROWS_AS(roc_auc(std::vector<double>{1, 2}, std::vector<int>{1}), ShapeError);
  CHECK_THROWS_AS(roc_auc(std::vector<double>{1, 2}, std::vector<int>{0, 2}), ConfigError);
}

TEST_CASE("roc_auc matches the pairwise count") {
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<int> coarse(0, 4);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> s(40);
    std::vector<int> y(40);
    for (std::size_t i = 0; i < s.size(); ++i) {
      s[i] = coarse(rng);  // many ties
      y[i] = int(i % 3 == 0);
    }
    double wins = 0, pairs = 0;
    for (std::size_t i = 0; i < s.size(); ++i)
      for (std::size_t j = 0; j < s.size(); ++j)
        if (y[i] == 1 && y[j] == 0) {
          pairs += 1;
          wins += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
        }
    CHECK(roc_auc(s, y) == doctest::Approx(wins / pairs).epsilon(1e-12));
  }
}

TEST_CASE("accuracy") {
  CHECK(accuracy(std::vector<int>{0, 1, 2, 2}, std::vector<int>{0, 1, 1, 2}) == 0.75);
  CHECK_THROWS_AS(accuracy(std::vector<int>{}, std::vector<int>{}), ConfigError);
  CHECK_THROWS_AS(accuracy(std::vector<int>{0}, std::vector<int>{0, 1}), ShapeError);
}

TEST_CASE("config validation and JSON") {
  TrainConfig c = quick_config();
  c.mode = Mode::concept_supervised;
  c.beta = 0.25;
  c.ablate_graph = true;
  const TrainConfig r = train_config_from_json(train_config_json(c));
  CHECK(train_config_json(r) == train_config_json(c));
  CHECK(r.mode == Mode::concept_supervised);
  CHECK(r.ablate_graph);
  CHECK(r.beta == 0.25);

  const TrainConfig partial = train_config_from_json(R"({"epochs": 7})");
  CHECK(partial.epochs == 7);
  CHECK(partial.batch_size == TrainConfig{}.batch_size);
  CHECK_THROWS_AS(train_config_from_json(R"({"epochs": 7, "epoch": 3})"), ConfigError);
  CHECK_THROWS_AS(train_config_from_json("[1]"), ConfigError);
  CHECK_THROWS_AS(train_config_from_json(R"({"epochs": "many"})"), ConfigError);

  TrainConfig bad = quick_config();
  bad.epochs = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = quick_config();
  bad.batch_size = 1;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad.alpha = 0;
  CHECK_NOTHROW(bad.validate());
  bad = quick_config();
  bad.lr = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("training fits linearly separable data") {
  const EmbeddingDataset data = separable_dataset(400, 5);
  TrainConfig c;
  c.epochs = 200;
  c.batch_size = 32;
  c.lr = 5e-2;
  c.alpha = 0;
  c.beta = 0;
  c.layers = 1;
  c.hidden = 0;
  c.seed = 1;
  const TrainResult r = train(c, data);
  CHECK(r.history.epochs.size() == 200);
  CHECK(evaluate(r.final_model, data.split("train")).label_accuracy >= 0.95);
  CHECK(r.history.epochs.back().ce < r.history.epochs.front().ce);
}

TEST_CASE("noise-free generator data is learnable") {
  // With k <= d the concept states are recoverable from the image embedding.
  SyntheticSpec s;
  s.concepts = 8;
  s.dim = 16;
  s.classes = 3;
  s.n_train = 600;
  s.n_val = 200;
  s.n_test = 200;
  s.noise = 0.0;
  const SyntheticData syn = generate_synthetic(s, 1);
  TrainConfig c;
  c.epochs = 100;
  c.batch_size = 32;
  c.lr = 1e-2;
  c.alpha = 0;
  c.beta = 0;
  c.layers = 1;
  c.seed = 1;
  const TrainResult r = train(c, syn.data);
  CHECK(evaluate(r.final_model, syn.data.split("train")).label_accuracy >= 0.95);
}

TEST_CASE("training is deterministic and selects on val") {
  const SyntheticData syn = small_synthetic(Mode::label_free, 2);
  const TrainConfig c = quick_config();
  const TrainResult a = train(c, syn.data);
  const TrainResult b = train(c, syn.data);
  CHECK(a.history == b.history);
  CHECK(a.best.graph().adjacency_value(0) == b.best.graph().adjacency_value(0));

  double best = -1;
  std::size_t best_epoch = 0;
  for (std::size_t e = 0; e < a.history.epochs.size(); ++e)
    if (a.history.epochs[e].val_accuracy > best) {
      best = a.history.epochs[e].val_accuracy;
      best_epoch = e;
    }
  CHECK(a.best_epoch == best_epoch);
  CHECK(evaluate(a.best, syn.data.split("val")).label_accuracy == best);
  CHECK(evaluate(a.final_model, syn.data.split("val")).label_accuracy == a.history.epochs.back().val_accuracy);

  TrainConfig other = c;
  other.seed = 4;
  CHECK_FALSE(train(other, syn.data).history == a.history);
}

TEST_CASE("supervised training reports concept AUC") {
  const SyntheticData syn = small_synthetic(Mode::concept_supervised, 3);
  TrainConfig c = quick_config();
  c.mode = Mode::concept_supervised;
  const TrainResult r = train(c, syn.data);
  for (const auto& e : r.history.epochs) {
    REQUIRE(e.val_concept_auc.has_value());
    CHECK(*e.val_concept_auc >= 0.0);
    CHECK(*e.val_concept_auc <= 1.0);
    CHECK(e.bce > 0.0);
    CHECK(e.l_emb == 0.0);
  }
  const Metrics m = evaluate(r.best, syn.data.split("test"));
  REQUIRE(m.concept_roc_auc.has_value());
  CHECK(m.samples == 100);

  TrainConfig lf = quick_config();
  lf.mode = Mode::concept_supervised;
  EmbeddingDataset unlabeled = syn.data;
  unlabeled.annotations = Matrix();
  CHECK_THROWS_AS(train(lf, unlabeled), ConfigError);
}

TEST_CASE("larger sparsity weight leaves fewer edges") {
  const SyntheticData syn = small_synthetic(Mode::label_free, 4);
  std::size_t dense = 0, sparse = 0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    TrainConfig c = quick_config();
    c.seed = seed;
    c.beta = 0;
    dense += union_pairs(extract_edges(train(c, syn.data).final_model.graph())).size();
    c.beta = 10;
    sparse += union_pairs(extract_edges(train(c, syn.data).final_model.graph())).size();
  }
  CHECK(sparse < dense);
}

TEST_CASE("ablated graph stays zero") {
  const SyntheticData syn = small_synthetic(Mode::label_free, 5);
  TrainConfig c = quick_config();
  c.ablate_graph = true;
  const TrainResult r = train(c, syn.data);
  for (std::size_t l = 0; l < c.layers; ++l) CHECK(r.final_model.graph().adjacency_value(l) == Matrix(10, 10));
  for (const auto& e : r.history.epochs) {
    CHECK(e.edge_count == 0);
    CHECK(e.l1 == 0.0);
  }
}

TEST_CASE("artifacts and checkpoint evaluation") {
  const fs::path dir = fs::temp_directory_path() / "gcbm_test_training_out";
  fs::remove_all(dir);
  const SyntheticData syn = small_synthetic(Mode::concept_supervised, 6);
  TrainConfig c = quick_config();
  c.mode = Mode::concept_supervised;
  const TrainResult r = train(c, syn.data, dir);
  for (const char* f : {"best.gcbm", "final.gcbm", "history.json"}) CHECK(fs::exists(dir / f));

  const TrainHistory h = TrainHistory::from_json(read_file(dir / "history.json"));
  CHECK(h.to_json() == r.history.to_json());
  CHECK(h == r.history);
  CHECK(TrainHistory::from_json(h.to_json()).to_json() == h.to_json());
  CHECK_THROWS_AS(TrainHistory::from_json("{\"epochs\": 3}"), FormatError);

  std::string echo;
  const GraphCbmModel loaded = load_checkpoint(dir / "best.gcbm", &echo);
  CHECK(train_config_json(train_config_from_json(echo)) == train_config_json(c));
  const EmbeddingDataset test = syn.data.split("test");
  const Metrics a = evaluate(r.best, test), b = evaluate(loaded, test);
  CHECK(a.label_accuracy == b.label_accuracy);
  CHECK(*a.concept_roc_auc == *b.concept_roc_auc);
  const ForwardOutput pa = predict_dataset(r.best, test.images), pb = predict_dataset(loaded, test.images);
  CHECK(pa.logits == pb.logits);
  CHECK(pa.c_tilde == pb.c_tilde);
  fs::remove_all(dir);
}

TEST_CASE("chunked prediction matches one batch") {
  const SyntheticData syn = small_synthetic(Mode::label_free, 7);
  GraphCbmModel model(quick_config().model_config(syn.data), syn.data.concepts);
  // Larger than any chunk, so predict_dataset splits it.
  std::mt19937_64 rng(1);
  const Matrix images = random_matrix(5000, syn.data.dim(), rng);
  const ForwardOutput whole = model.predict(images);
  const ForwardOutput chunked = predict_dataset(model, images);
  CHECK(testing::max_abs_diff(whole.logits, chunked.logits) < 1e-12);
  CHECK(testing::max_abs_diff(whole.c_tilde, chunked.c_tilde) < 1e-12);
  CHECK(whole.y_hat == chunked.y_hat);
  const ForwardOutput from_scores = predict_scores_dataset(model, whole.c);
  CHECK(testing::max_abs_diff(from_scores.logits, whole.logits) < 1e-12);
}

TEST_CASE("evaluate rejects mismatched data") {
  const SyntheticData syn = small_synthetic(Mode::label_free, 8);
  GraphCbmModel model(quick_config().model_config(syn.data), syn.data.concepts);
  EmbeddingDataset wrong = syn.data;
  std::mt19937_64 rng(2);
  wrong.images = random_matrix(wrong.size(), 3, rng);
  CHECK_THROWS_AS(evaluate(model, wrong), ShapeError);
  CHECK_THROWS_AS(evaluate(model, syn.data.select({})), ConfigError);
  CHECK_FALSE(evaluate(model, syn.data).concept_roc_auc.has_value());
}
