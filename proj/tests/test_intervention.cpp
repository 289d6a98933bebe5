#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "gcbm/error.hpp"
#include "gcbm/intervention.hpp"
#include "gcbm/training.hpp"
#include "support.hpp"

using namespace gcbm;
using gcbm::testing::random_matrix;

namespace {

using Idx = std::vector<std::size_t>;

// Two-class toy: the predictor is argmax over the two concept scores.
struct Toy {
  Matrix scores = Matrix::from_rows({{1, 0}, {0, 1}, {0, 1}, {1, 0}});
  std::vector<int> labels{0, 0, 1, 1};
  std::vector<int> predicted() const { return argmax_rows(scores); }
};

SyntheticData synthetic(Mode mode, std::uint64_t seed) {
  SyntheticSpec s;
  s.concepts = 12;
  s.dim = 8;
  s.classes = 4;
  s.n_train = 400;
  s.n_val = 200;
  s.n_test = 200;
  s.mode = mode;
  return generate_synthetic(s, seed);
}

GraphCbmModel trained(const SyntheticData& syn, Mode mode) {
  TrainConfig c;
  c.mode = mode;
  c.epochs = 15;
  c.batch_size = 32;
  c.lr = 1e-2;
  c.hidden = 16;
  c.layers = 2;
  c.seed = 1;
  return train(c, syn.data).best;
}

}  // namespace

TEST_CASE("difference prototypes on the toy") {
  const Toy toy;
  const auto p = build_difference_prototypes(toy.scores, toy.predicted(), toy.labels, 2);
  REQUIRE(p.classes() == 2);
  REQUIRE(p.available(0));
  CHECK(*p.delta[0] == std::vector<double>{1, -1});
  CHECK(*p.delta[1] == std::vector<double>{-1, 1});
  CHECK(p.right_counts == std::vector<std::size_t>{1, 1});
  CHECK(p.wrong_counts == std::vector<std::size_t>{1, 1});
  CHECK(p.available_count() == 2);

  bool applied = false;
  const auto edited = lazy_intervene(toy.scores.row(1), 0, p, &applied);
  CHECK(applied);
  CHECK(edited == std::vector<double>{1, 0});
  CHECK(argmax_rows(Matrix(1, 2, edited))[0] == 0);
}

TEST_CASE("prototypes ignore sample order") {
  std::mt19937_64 rng(3);
  const Matrix s = random_matrix(60, 5, rng);
  std::vector<int> labels(60), pred(60);
  std::uniform_int_distribution<int> cls(0, 2);
  for (std::size_t i = 0; i < 60; ++i) {
    labels[i] = cls(rng);
    pred[i] = cls(rng);
  }
  Idx perm(60);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  Matrix ps(60, 5);
  std::vector<int> pl(60), pp(60);
  for (std::size_t i = 0; i < 60; ++i) {
    std::copy(s.row(perm[i]).begin(), s.row(perm[i]).end(), ps.row(i).begin());
    pl[i] = labels[perm[i]];
    pp[i] = pred[perm[i]];
  }
  const auto a = build_difference_prototypes(s, pred, labels, 3);
  const auto b = build_difference_prototypes(ps, pp, pl, 3);
  CHECK(a.right_counts == b.right_counts);
  CHECK(a.wrong_counts == b.wrong_counts);
  for (std::size_t c = 0; c < 3; ++c) {
    REQUIRE(a.available(c) == b.available(c));
    if (!a.available(c)) continue;
    for (std::size_t j = 0; j < 5; ++j) CHECK((*a.delta[c])[j] == doctest::Approx((*b.delta[c])[j]).epsilon(1e-12));
  }
}

TEST_CASE("a perfect predictor yields no prototypes") {
  const Toy toy;
  const auto p = build_difference_prototypes(toy.scores, toy.labels, toy.labels, 2);
  CHECK(p.available_count() == 0);
  bool applied = true;
  const auto c = lazy_intervene(toy.scores.row(1), 0, p, &applied);
  CHECK_FALSE(applied);
  CHECK(c == std::vector<double>{0, 1});
  CHECK_THROWS_AS(build_difference_prototypes(toy.scores, std::vector<int>{0}, toy.labels, 2), ShapeError);
  CHECK_THROWS_AS(build_difference_prototypes(toy.scores, toy.labels, std::vector<int>{0, 0, 1, 5}, 2), ConfigError);
}

TEST_CASE("lazy intervention is idempotent once a sample is correct") {
  const Toy toy;
  const auto p = build_difference_prototypes(toy.scores, toy.predicted(), toy.labels, 2);
  Matrix scores = toy.scores;
  for (int pass = 0; pass < 2; ++pass) {
    const auto pred = argmax_rows(scores);
    for (std::size_t i = 0; i < scores.rows(); ++i) {
      const auto row = intervene_row(Mode::label_free, scores.row(i), toy.labels[i], pred[i] != toy.labels[i], {}, p,
                                     Idx{0, 1});
      std::copy(row.begin(), row.end(), scores.row(i).begin());
    }
    if (pass == 0) CHECK(argmax_rows(scores) == toy.labels);
  }
  CHECK(scores == Matrix::from_rows({{1, 0}, {1, 0}, {0, 1}, {0, 1}}));
}

TEST_CASE("UCP selection") {
  const std::vector<double> c{3, 0.01, -2, 0.2};
  CHECK(select_concepts_ucp(c, 0.5) == Idx{1, 3});
  CHECK(select_concepts_ucp(c, 0.25) == Idx{1});
  CHECK(select_concepts_ucp(c, 0.0).empty());
  CHECK(select_concepts_ucp(c, 1.0) == Idx{0, 1, 2, 3});
  // Equal uncertainty: the lower index wins.
  CHECK(select_concepts_ucp(std::vector<double>{1, -1, 1}, 1.0 / 3.0) == Idx{0});
  CHECK_THROWS_AS(select_concepts_ucp(c, 1.5), ConfigError);
  CHECK_THROWS_AS(select_concepts_ucp(c, -0.1), ConfigError);
}

TEST_CASE("random selection") {
  std::mt19937_64 a(9), b(9);
  for (int t = 0; t < 10; ++t) {
    const Idx s = select_concepts_random(20, 0.3, a);
    CHECK(s == select_concepts_random(20, 0.3, b));
    CHECK(s.size() == 6);
    CHECK(std::is_sorted(s.begin(), s.end()));
    CHECK(std::adjacent_find(s.begin(), s.end()) == s.end());
    CHECK(s.back() < 20);
  }
  std::mt19937_64 r(1);
  CHECK(select_concepts_random(7, 1.0, r).size() == 7);
  CHECK(policy_from_string(to_string(Policy::random)) == Policy::random);
  CHECK(policy_from_string("ucp") == Policy::ucp);
  CHECK_THROWS_AS(policy_from_string("greedy"), ConfigError);
}

TEST_CASE("supervised intervention rule") {
  const std::vector<double> c{2, -1, 0.5, -3};
  const std::vector<double> ann{0, 0, 1, 1};
  CHECK(intervene_supervised(c, ann, Idx{0, 1, 2, 3}) == std::vector<double>{-3, -1, 0.5, 3});
  CHECK(intervene_supervised(c, ann, Idx{3}, 5.0) == std::vector<double>{2, -1, 0.5, 5});
  CHECK(intervene_supervised(c, ann, Idx{}) == c);
  CHECK_THROWS_AS(intervene_supervised(c, ann, Idx{4}), ConfigError);
  CHECK_THROWS_AS(intervene_supervised(c, std::vector<double>{1}, Idx{}), ShapeError);
  CHECK(intervene_row(Mode::concept_supervised, c, 0, false, ann, {}, Idx{0}) == std::vector<double>{-3, -1, 0.5, -3});
  CHECK_THROWS_AS(intervene_row(Mode::concept_supervised, c, 0, false, {}, {}, Idx{0}), ConfigError);
}

TEST_CASE("label-free rule touches only selected concepts of misclassified samples") {
  const Toy toy;
  const auto p = build_difference_prototypes(toy.scores, toy.predicted(), toy.labels, 2);
  const std::vector<double> c{0, 1};
  CHECK(intervene_row(Mode::label_free, c, 0, true, {}, p, Idx{0}) == std::vector<double>{1, 1});
  CHECK(intervene_row(Mode::label_free, c, 0, true, {}, p, Idx{0, 1}) == lazy_intervene(c, 0, p));
  CHECK(intervene_row(Mode::label_free, c, 0, false, {}, p, Idx{0, 1}) == c);
}

TEST_CASE("lazy intervention on generator data does not hurt") {
  const SyntheticData syn = synthetic(Mode::label_free, 4);
  const GraphCbmModel model = trained(syn, Mode::label_free);
  const EmbeddingDataset test = syn.data.split("test");
  const auto protos = build_difference_prototypes(model, test);
  const LazyOutcome r = lazy_intervene_dataset(model, test, protos);
  CHECK(r.accuracy_before == evaluate(model, test).label_accuracy);
  CHECK(r.accuracy_after >= r.accuracy_before);
  const auto wrong = static_cast<std::size_t>(std::lround((1.0 - r.accuracy_before) * double(test.size())));
  CHECK(r.intervened + r.skipped_no_prototype == wrong);
}

TEST_CASE("intervention curves") {
  for (Mode mode : {Mode::label_free, Mode::concept_supervised}) {
    CAPTURE(to_string(mode));
    const SyntheticData syn = synthetic(mode, 5);
    const GraphCbmModel model = trained(syn, mode);
    const EmbeddingDataset test = syn.data.split("test");
    const std::vector<double> ratios{0.0, 0.5, 1.0};
    const auto ucp = intervention_curve(model, test, ratios);
    REQUIRE(ucp.size() == 3);
    CHECK(ucp[0].ratio == 0.0);
    CHECK(ucp[0].accuracy == evaluate(model, test).label_accuracy);
    // Only misclassified samples are edited in label-free mode.
    if (mode == Mode::label_free) CHECK(ucp[2].accuracy >= ucp[0].accuracy);

    CurveConfig rnd;
    rnd.policy = Policy::random;
    rnd.seed = 2;
    const auto r1 = intervention_curve(model, test, ratios, rnd);
    const auto r2 = intervention_curve(model, test, ratios, rnd);
    for (std::size_t i = 0; i < 3; ++i) CHECK(r1[i].accuracy == r2[i].accuracy);
    // At ratio 1 both policies select every concept.
    CHECK(r1[2].accuracy == ucp[2].accuracy);

    if (mode == Mode::label_free) {
      // Ratio 1 with prototypes from the same split is the full lazy intervention.
      const auto lazy = lazy_intervene_dataset(model, test, build_difference_prototypes(model, test));
      CHECK(ucp[2].accuracy == lazy.accuracy_after);
      const EmbeddingDataset val = syn.data.split("val");
      const auto other = intervention_curve(model, test, ratios, {}, &val);
      CHECK(other[0].accuracy == ucp[0].accuracy);
    }
  }
  const SyntheticData syn = synthetic(Mode::concept_supervised, 6);
  const GraphCbmModel model = trained(syn, Mode::concept_supervised);
  EmbeddingDataset bare = syn.data.split("test");
  bare.annotations = Matrix();
  const std::vector<double> ratios{0.5};
  CHECK_THROWS_AS(intervention_curve(model, bare, ratios), ConfigError);
}
