#include "gcbm/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include <json.hpp>

#include "gcbm/losses.hpp"
#include "gcbm/optim.hpp"

namespace gcbm {

using json = nlohmann::json;

void TrainConfig::validate() const {
  if (epochs == 0) throw ConfigError("epochs must be > 0");
  if (batch_size == 0) throw ConfigError("batch_size must be > 0");
  if (alpha > 0.0 && batch_size < 2) throw ConfigError("batch_size must be >= 2 when alpha > 0");
  if (!(lr > 0.0)) throw ConfigError("lr must be > 0");
  if (layers == 0) throw ConfigError("layers must be >= 1");
  LossConfig{alpha, beta, tau, mode}.validate();
}

ModelConfig TrainConfig::model_config(const EmbeddingDataset& data) const {
  ModelConfig m;
  m.mode = mode;
  m.concepts = data.concept_count();
  m.dim = data.dim();
  m.classes = data.classes;
  m.layers = layers;
  m.hidden = hidden;
  m.concept_hidden = concept_hidden;
  m.ablate_graph = ablate_graph;
  m.graph_init_scale = graph_init_scale;
  m.edge_threshold = edge_threshold;
  m.seed = seed;
  return m;
}

std::string train_config_json(const TrainConfig& c) {
  return json{{"epochs", c.epochs},
              {"batch_size", c.batch_size},
              {"lr", c.lr},
              {"alpha", c.alpha},
              {"beta", c.beta},
              {"tau", c.tau},
              {"layers", c.layers},
              {"seed", c.seed},
              {"mode", to_string(c.mode)},
              {"hidden", c.hidden},
              {"concept_hidden", c.concept_hidden},
              {"ablate_graph", c.ablate_graph},
              {"graph_init_scale", c.graph_init_scale},
              {"edge_threshold", c.edge_threshold}}
      .dump(2);
}

TrainConfig train_config_from_json(const std::string& text) {
  TrainConfig c;
  try {
    const json j = json::parse(text);
    if (!j.is_object()) throw ConfigError("train config must be a JSON object");
    static const char* const known[] = {"epochs", "batch_size", "lr", "alpha", "beta",
                                        "tau", "layers", "seed", "mode", "hidden",
                                        "concept_hidden", "ablate_graph", "graph_init_scale",
                                        "edge_threshold"};
    for (const auto& [key, value] : j.items()) {
      if (std::find(std::begin(known), std::end(known), key) == std::end(known)) {
        throw ConfigError("train config: unknown field '" + key + "'");
      }
    }
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.lr = j.value("lr", c.lr);
    c.alpha = j.value("alpha", c.alpha);
    c.beta = j.value("beta", c.beta);
    c.tau = j.value("tau", c.tau);
    c.layers = j.value("layers", c.layers);
    c.seed = j.value("seed", c.seed);
    if (j.contains("mode")) c.mode = mode_from_string(j["mode"].get<std::string>());
    c.hidden = j.value("hidden", c.hidden);
    c.concept_hidden = j.value("concept_hidden", c.concept_hidden);
    c.ablate_graph = j.value("ablate_graph", c.ablate_graph);
    c.graph_init_scale = j.value("graph_init_scale", c.graph_init_scale);
    c.edge_threshold = j.value("edge_threshold", c.edge_threshold);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("invalid train config: ") + e.what());
  }
  c.validate();
  return c;
}

// ---- history ---------------------------------------------------------------

std::string TrainHistory::to_json() const {
  json arr = json::array();
  for (const auto& e : epochs) {
    json r = {{"total", e.total},
              {"ce", e.ce},
              {"bce", e.bce},
              {"l_emb", e.l_emb},
              {"l_act", e.l_act},
              {"l1", e.l1},
              {"train_accuracy", e.train_accuracy},
              {"val_accuracy", e.val_accuracy},
              {"val_concept_auc", nullptr},
              {"edge_count", e.edge_count}};
    if (e.val_concept_auc) r["val_concept_auc"] = *e.val_concept_auc;
    arr.push_back(std::move(r));
  }
  return json{{"epochs", arr}}.dump(2);
}

TrainHistory TrainHistory::from_json(const std::string& text) {
  TrainHistory h;
  try {
    const json doc = json::parse(text);
    if (!doc.at("epochs").is_array()) throw FormatError("invalid history: epochs must be an array");
    for (const auto& r : doc.at("epochs")) {
      EpochRecord e;
      e.total = r.at("total").get<double>();
      e.ce = r.at("ce").get<double>();
      e.bce = r.at("bce").get<double>();
      e.l_emb = r.at("l_emb").get<double>();
      e.l_act = r.at("l_act").get<double>();
      e.l1 = r.at("l1").get<double>();
      e.train_accuracy = r.at("train_accuracy").get<double>();
      e.val_accuracy = r.at("val_accuracy").get<double>();
      if (!r.at("val_concept_auc").is_null()) e.val_concept_auc = r["val_concept_auc"].get<double>();
      e.edge_count = r.at("edge_count").get<std::size_t>();
      h.epochs.push_back(e);
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("invalid history: ") + e.what());
  }
  return h;
}

// ---- metrics ---------------------------------------------------------------

double accuracy(std::span<const int> predicted, std::span<const int> labels) {
  if (predicted.size() != labels.size()) throw ShapeError("accuracy: length mismatch");
  if (labels.empty()) throw ConfigError("accuracy of an empty set");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hits += predicted[i] == labels[i];
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

double roc_auc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw ShapeError("roc_auc: length mismatch");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Average ranks over tie groups, then U = R_pos - n_pos (n_pos + 1) / 2.
  double rank_sum = 0.0;
  std::size_t n_pos = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t t = i; t < j; ++t) {
      if (labels[order[t]] != 0 && labels[order[t]] != 1) throw ConfigError("roc_auc labels must be binary");
      if (labels[order[t]] == 1) {
        rank_sum += avg_rank;
        ++n_pos;
      }
    }
    i = j;
  }
  const std::size_t n_neg = scores.size() - n_pos;
  if (n_pos == 0 || n_neg == 0) throw ConfigError("roc_auc needs both classes present");
  const double np = static_cast<double>(n_pos);
  return (rank_sum - np * (np + 1.0) / 2.0) / (np * static_cast<double>(n_neg));
}

namespace {

template <typename Fn>
ForwardOutput predict_chunked(const Matrix& input, Fn&& run) {
  constexpr std::size_t kChunk = 1024;
  if (input.rows() <= kChunk) return run(input);
  ForwardOutput out;
  const std::size_t n = input.rows();
  bool first = true;
  for (std::size_t start = 0; start < n; start += kChunk) {
    const std::size_t len = std::min(kChunk, n - start);
    Matrix chunk(len, input.cols());
    std::copy_n(input.row(start).begin(), len * input.cols(), chunk.data().begin());
    const ForwardOutput part = run(chunk);
    auto put = [&](Matrix& dst, const Matrix& src) {
      if (src.empty()) return;
      if (first) dst = Matrix(n, src.cols());
      std::copy(src.data().begin(), src.data().end(), dst.row(start).begin());
    };
    put(out.c, part.c);
    put(out.c_tilde, part.c_tilde);
    put(out.z_g, part.z_g);
    put(out.z_v_proj, part.z_v_proj);
    put(out.logits, part.logits);
    out.y_hat.insert(out.y_hat.end(), part.y_hat.begin(), part.y_hat.end());
    first = false;
  }
  return out;
}

}  // namespace

ForwardOutput predict_dataset(const GraphCbmModel& model, const Matrix& images) {
  return predict_chunked(images, [&](const Matrix& x) { return model.predict(x); });
}

ForwardOutput predict_scores_dataset(const GraphCbmModel& model, const Matrix& scores) {
  return predict_chunked(scores, [&](const Matrix& c) { return model.predict_from_scores(c); });
}

namespace {

// Macro AUC of sigmoid(c_tilde) against annotations; sigmoid is monotone, so
// ranking c_tilde directly gives the same statistic.
std::optional<double> macro_auc(const Matrix& c_tilde, const Matrix& annotations,
                                std::vector<std::size_t>& skipped) {
  const std::size_t n = c_tilde.rows(), k = c_tilde.cols();
  double total = 0.0;
  std::size_t used = 0;
  std::vector<double> scores(n);
  std::vector<int> labels(n);
  for (std::size_t j = 0; j < k; ++j) {
    std::size_t pos = 0;
    for (std::size_t i = 0; i < n; ++i) {
      scores[i] = 1.0 / (1.0 + std::exp(-c_tilde(i, j)));
      labels[i] = annotations(i, j) > 0.5 ? 1 : 0;
      pos += static_cast<std::size_t>(labels[i]);
    }
    if (pos == 0 || pos == n) {
      skipped.push_back(j);
      continue;
    }
    total += roc_auc(scores, labels);
    ++used;
  }
  if (used == 0) return std::nullopt;
  return total / static_cast<double>(used);
}

}  // namespace

Metrics evaluate(const GraphCbmModel& model, const EmbeddingDataset& data) {
  if (data.size() == 0) throw ConfigError("evaluate: empty dataset");
  if (data.dim() != model.config().dim) {
    throw ShapeError("evaluate: dataset d=" + std::to_string(data.dim()) + " but model d=" +
                     std::to_string(model.config().dim));
  }
  const ForwardOutput out = predict_dataset(model, data.images);
  Metrics m;
  m.samples = data.size();
  m.label_accuracy = accuracy(out.y_hat, data.labels);
  if (model.mode() == Mode::concept_supervised && data.has_annotations()) {
    m.concept_roc_auc = macro_auc(out.c_tilde, data.annotations, m.skipped_concepts);
  }
  return m;
}

// ---- training loop ---------------------------------------------------------

namespace {

struct Batch {
  Matrix images;
  Matrix annotations;
  std::vector<int> labels;
};

Batch gather(const EmbeddingDataset& data, std::span<const std::size_t> idx) {
  Batch b;
  b.images = Matrix(idx.size(), data.dim());
  if (data.has_annotations()) b.annotations = Matrix(idx.size(), data.annotations.cols());
  for (std::size_t r = 0; r < idx.size(); ++r) {
    std::copy_n(data.images.row(idx[r]).begin(), data.dim(), b.images.row(r).begin());
    if (data.has_annotations()) {
      std::copy_n(data.annotations.row(idx[r]).begin(), data.annotations.cols(), b.annotations.row(r).begin());
    }
    b.labels.push_back(data.labels[idx[r]]);
  }
  return b;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  out << text << "\n";
}

}  // namespace

TrainResult train(const TrainConfig& cfg, const EmbeddingDataset& data,
                  const std::optional<std::filesystem::path>& out_dir) {
  cfg.validate();
  data.validate();
  data.require_mode(cfg.mode);
  const EmbeddingDataset train_set = data.has_split("train") ? data.split("train") : data;
  const bool has_val = data.has_split("val");
  const EmbeddingDataset val_set = has_val ? data.split("val") : EmbeddingDataset{};
  if (train_set.size() == 0) throw ConfigError("train: empty training set");

  GraphCbmModel model(cfg.model_config(data), data.has_concepts() ? data.concepts : Matrix{});
  const std::size_t n = train_set.size();
  const std::size_t batches = (n + cfg.batch_size - 1) / cfg.batch_size;
  AdamConfig acfg;
  acfg.lr = cfg.lr;
  acfg.total_steps = cfg.epochs * batches;
  Adam opt(model.trainable_parameters(), acfg);

  LossConfig lcfg{cfg.alpha, cfg.beta, cfg.tau, cfg.mode};
  LossConfig lcfg_small = lcfg;
  lcfg_small.alpha = 0.0;

  std::mt19937_64 shuffle_rng(cfg.seed ^ 0x5DEECE66DULL);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);

  TrainResult result;
  double best_val = -1.0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    EpochRecord rec;
    std::size_t hits = 0;
    for (std::size_t b = 0; b < batches; ++b) {
      const std::size_t start = b * cfg.batch_size;
      const std::size_t len = std::min(cfg.batch_size, n - start);
      const Batch batch = gather(train_set, std::span(order).subspan(start, len));
      const LossConfig& lc = len < 2 ? lcfg_small : lcfg;
      try {
        ForwardTrace trace = model.forward(batch.images);
        LossTerms terms = cfg.mode == Mode::label_free
                              ? total_loss_labelfree(trace, batch.labels, batch.images, model.graph(), lc)
                              : total_loss_supervised(trace, batch.labels, batch.annotations, model.graph(), lc);
        backward(terms.total);
        opt.step();
        opt.zero_grad();
        rec.total += terms.total.item();
        rec.ce += terms.ce;
        rec.bce += terms.bce;
        rec.l_emb += terms.l_emb;
        rec.l_act += terms.l_act;
        rec.l1 += terms.l1;
        const auto pred = argmax_rows(trace.logits.value());
        for (std::size_t i = 0; i < len; ++i) hits += pred[i] == batch.labels[i];
      } catch (const NumericError& e) {
        throw NumericError("epoch " + std::to_string(epoch) + ", batch " + std::to_string(b) + ": " + e.what());
      }
    }
    const double nb = static_cast<double>(batches);
    rec.total /= nb;
    rec.ce /= nb;
    rec.bce /= nb;
    rec.l_emb /= nb;
    rec.l_act /= nb;
    rec.l1 /= nb;
    rec.train_accuracy = static_cast<double>(hits) / static_cast<double>(n);
    rec.edge_count = union_pairs(extract_edges(model.graph())).size();
    if (has_val) {
      const Metrics vm = evaluate(model, val_set);
      rec.val_accuracy = vm.label_accuracy;
      rec.val_concept_auc = vm.concept_roc_auc;
      if (vm.label_accuracy > best_val) {
        best_val = vm.label_accuracy;
        result.best = model.clone();
        result.best_epoch = epoch;
      }
    }
    result.history.epochs.push_back(rec);
  }
  result.final_model = std::move(model);
  if (!has_val) {
    result.best = result.final_model.clone();
    result.best_epoch = cfg.epochs - 1;
  }

  if (out_dir) {
    std::filesystem::create_directories(*out_dir);
    const std::string echo = train_config_json(cfg);
    save_checkpoint(*out_dir / "best.gcbm", result.best, echo);
    save_checkpoint(*out_dir / "final.gcbm", result.final_model, echo);
    write_text(*out_dir / "history.json", result.history.to_json());
  }
  return result;
}

}  // namespace gcbm
