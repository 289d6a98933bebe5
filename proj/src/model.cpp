#include "gcbm/model.hpp"

#include <cmath>
#include <fstream>

#include <json.hpp>

#include "gcbm/container.hpp"

namespace gcbm {

using json = nlohmann::json;

std::string to_string(Mode mode) {
  return mode == Mode::label_free ? "label_free" : "concept_supervised";
}

Mode mode_from_string(const std::string& s) {
  if (s == "label_free") return Mode::label_free;
  if (s == "concept_supervised") return Mode::concept_supervised;
  throw ConfigError("unknown mode '" + s + "' (expected label_free or concept_supervised)");
}

// ---- Mlp -------------------------------------------------------------------

Mlp::Mlp(const std::vector<std::size_t>& widths, std::mt19937_64& rng) {
  if (widths.size() < 2) throw ConfigError("Mlp needs at least input and output widths");
  for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
    const std::size_t in = widths[i], out = widths[i + 1];
    if (in == 0 || out == 0) throw ConfigError("Mlp widths must be positive");
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    Matrix w(in, out), b(1, out);
    for (double& x : w.data()) x = dist(rng);
    for (double& x : b.data()) x = dist(rng);
    weights_.push_back(Tensor::parameter(std::move(w)));
    biases_.push_back(Tensor::parameter(std::move(b)));
  }
}

Tensor Mlp::forward(const Tensor& x) const {
  if (weights_.empty()) throw Error("Mlp::forward on an empty network");
  if (x.cols() != in_dim()) {
    throw ShapeError("Mlp::forward: input " + shape_str(x.value()) + " for in_dim " +
                     std::to_string(in_dim()));
  }
  Tensor h = x;
  for (std::size_t i = 0; i < weights_.size(); ++i) {
    h = add_row(matmul(h, weights_[i]), biases_[i]);
    if (i + 1 < weights_.size()) h = relu(h);
  }
  return h;
}

std::vector<Tensor> Mlp::parameters() const {
  std::vector<Tensor> out;
  for (std::size_t i = 0; i < weights_.size(); ++i) {
    out.push_back(weights_[i]);
    out.push_back(biases_[i]);
  }
  return out;
}

std::size_t Mlp::in_dim() const { return weights_.empty() ? 0 : weights_.front().rows(); }
std::size_t Mlp::out_dim() const { return weights_.empty() ? 0 : weights_.back().cols(); }

std::vector<std::size_t> Mlp::widths() const {
  std::vector<std::size_t> w;
  if (weights_.empty()) return w;
  w.push_back(in_dim());
  for (const auto& t : weights_) w.push_back(t.cols());
  return w;
}

Mlp Mlp::clone() const {
  Mlp m;
  for (const auto& w : weights_) m.weights_.push_back(Tensor::parameter(w.value()));
  for (const auto& b : biases_) m.biases_.push_back(Tensor::parameter(b.value()));
  return m;
}

// ---- GraphCbmModel ---------------------------------------------------------

std::vector<int> argmax_rows(const Matrix& logits) {
  std::vector<int> out(logits.rows(), 0);
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < logits.cols(); ++j)
      if (logits(i, j) > logits(i, best)) best = j;
    out[i] = static_cast<int>(best);
  }
  return out;
}

GraphCbmModel::GraphCbmModel(const ModelConfig& cfg, const Matrix& concept_embeddings) : cfg_(cfg) {
  if (cfg_.concepts == 0 || cfg_.dim == 0 || cfg_.classes == 0) {
    throw ConfigError("model config needs positive concepts, dim and classes");
  }
  if (cfg_.layers == 0) throw ConfigError("model config needs at least one graph layer");
  std::mt19937_64 rng(cfg_.seed);

  if (cfg_.ablate_graph) {
    graph_ = LatentGraph::zeros(cfg_.concepts, cfg_.layers);
  } else {
    graph_ = LatentGraph(cfg_.concepts, cfg_.layers, rng, cfg_.graph_init_scale);
  }
  graph_.set_edge_threshold(cfg_.edge_threshold);

  auto widths = [&](std::size_t in, std::size_t out) {
    return cfg_.hidden > 0 ? std::vector<std::size_t>{in, cfg_.hidden, out} : std::vector<std::size_t>{in, out};
  };
  head_ = Mlp(widths(cfg_.concepts, cfg_.classes), rng);

  if (cfg_.mode == Mode::label_free) {
    if (concept_embeddings.rows() != cfg_.concepts || concept_embeddings.cols() != cfg_.dim) {
      throw ShapeError("concept embeddings " + shape_str(concept_embeddings) + " do not match k=" +
                       std::to_string(cfg_.concepts) + ", d=" + std::to_string(cfg_.dim));
    }
    concepts_ = Tensor::constant(concept_embeddings);
    projector_ = Mlp(widths(cfg_.dim, cfg_.concepts), rng);
  } else {
    projector_ = Mlp({cfg_.dim, cfg_.concepts}, rng);
    if (cfg_.concept_hidden > 0) {
      concept_mlp_ = Mlp({cfg_.dim, cfg_.concept_hidden, cfg_.concepts}, rng);
    } else {
      concept_mlp_ = Mlp({cfg_.dim, cfg_.concepts}, rng);
    }
    std::uniform_real_distribution<double> dist(-0.1, 0.1);
    Matrix table(cfg_.concepts, cfg_.dim);
    for (double& x : table.data()) x = dist(rng);
    concepts_ = Tensor::parameter(std::move(table));
  }
}

Tensor GraphCbmModel::concept_scores_labelfree(const Tensor& z_v) const {
  if (cfg_.mode != Mode::label_free) throw ConfigError("label-free scores requested from a supervised model");
  if (z_v.cols() != cfg_.dim) {
    throw ShapeError("image embedding " + shape_str(z_v.value()) + " for d=" + std::to_string(cfg_.dim));
  }
  return matmul(z_v, transpose(concepts_));
}

Tensor GraphCbmModel::concept_scores_supervised(const Tensor& z_v) const {
  if (cfg_.mode != Mode::concept_supervised) {
    throw ConfigError("supervised scores requested from a label-free model");
  }
  return concept_mlp_.forward(z_v);
}

Tensor GraphCbmModel::concept_scores(const Tensor& z_v) const {
  return cfg_.mode == Mode::label_free ? concept_scores_labelfree(z_v) : concept_scores_supervised(z_v);
}

ForwardTrace GraphCbmModel::propagate(const Tensor& c) const {
  if (c.cols() != cfg_.concepts) {
    throw ShapeError("concept scores " + shape_str(c.value()) + " for k=" + std::to_string(cfg_.concepts));
  }
  const std::size_t n = c.rows();
  NodeState init;
  init.dim = cfg_.dim;
  init.act = transpose(c);
  init.emb = tile_cols(concepts_, n);
  LayerTrace trace = run_layers(graph_, init);

  ForwardTrace out;
  out.c = c;
  out.c_tilde = transpose(trace.final_state.act);
  out.z_g = reshape(col_mean(trace.final_state.emb), n, cfg_.dim);
  out.logits = head_.forward(out.c_tilde);
  return out;
}

ForwardTrace GraphCbmModel::forward(const Matrix& z_v) const {
  if (!z_v.all_finite()) throw NumericError("non-finite image embedding");
  Tensor x = Tensor::constant(z_v);
  ForwardTrace out = propagate(concept_scores(x));
  out.anchor = projector_.forward(x);
  return out;
}

ForwardOutput GraphCbmModel::predict_from_scores(const Matrix& c) const {
  NoGradGuard guard;
  ForwardTrace t = propagate(Tensor::constant(c));
  ForwardOutput out;
  out.c = c;
  out.c_tilde = t.c_tilde.value();
  out.z_g = t.z_g.value();
  out.logits = t.logits.value();
  out.y_hat = argmax_rows(out.logits);
  return out;
}

ForwardOutput GraphCbmModel::predict(const Matrix& z_v) const {
  NoGradGuard guard;
  ForwardTrace t = forward(z_v);
  ForwardOutput out;
  out.c = t.c.value();
  out.c_tilde = t.c_tilde.value();
  out.z_g = t.z_g.value();
  out.z_v_proj = t.anchor.value();
  out.logits = t.logits.value();
  out.y_hat = argmax_rows(out.logits);
  return out;
}

Matrix GraphCbmModel::initial_scores(const Matrix& z_v) const {
  NoGradGuard guard;
  return concept_scores(Tensor::constant(z_v)).value();
}

std::vector<Tensor> GraphCbmModel::trainable_parameters() const {
  std::vector<Tensor> out;
  if (!cfg_.ablate_graph) {
    for (const auto& w : graph_.raw_weights()) out.push_back(w);
  }
  for (const auto& p : head_.parameters()) out.push_back(p);
  for (const auto& p : projector_.parameters()) out.push_back(p);
  if (cfg_.mode == Mode::concept_supervised) {
    for (const auto& p : concept_mlp_.parameters()) out.push_back(p);
    out.push_back(concepts_);
  }
  return out;
}

std::vector<std::pair<std::string, Tensor>> GraphCbmModel::named_parameters() const {
  std::vector<std::pair<std::string, Tensor>> out;
  out.emplace_back("concepts", concepts_);
  for (std::size_t l = 0; l < graph_.layer_count(); ++l) {
    out.emplace_back("graph." + std::to_string(l), graph_.raw_weights()[l]);
  }
  auto add_mlp = [&](const std::string& prefix, const Mlp& m) {
    for (std::size_t i = 0; i < m.depth(); ++i) {
      out.emplace_back(prefix + "." + std::to_string(i) + ".weight", m.weight(i));
      out.emplace_back(prefix + "." + std::to_string(i) + ".bias", m.bias(i));
    }
  };
  add_mlp("head", head_);
  add_mlp("projector", projector_);
  if (cfg_.mode == Mode::concept_supervised) add_mlp("concept_mlp", concept_mlp_);
  return out;
}

GraphCbmModel GraphCbmModel::clone() const {
  GraphCbmModel m;
  m.cfg_ = cfg_;
  m.concepts_ = cfg_.mode == Mode::label_free ? concepts_ : Tensor::parameter(concepts_.value());
  m.graph_ = graph_.clone();
  m.head_ = head_.clone();
  m.projector_ = projector_.clone();
  if (concept_mlp_.depth() > 0) m.concept_mlp_ = concept_mlp_.clone();
  return m;
}

// ---- checkpoints -----------------------------------------------------------

namespace {

constexpr char kCheckpointMagic[4] = {'G', 'C', 'B', 'K'};
constexpr std::uint16_t kCheckpointVersion = 1;

json config_to_json(const ModelConfig& cfg) {
  return json{{"mode", to_string(cfg.mode)},
              {"concepts", cfg.concepts},
              {"dim", cfg.dim},
              {"classes", cfg.classes},
              {"layers", cfg.layers},
              {"hidden", cfg.hidden},
              {"concept_hidden", cfg.concept_hidden},
              {"ablate_graph", cfg.ablate_graph},
              {"graph_init_scale", cfg.graph_init_scale},
              {"edge_threshold", cfg.edge_threshold},
              {"seed", cfg.seed}};
}

ModelConfig config_from_json(const json& j) {
  ModelConfig cfg;
  cfg.mode = mode_from_string(j.at("mode").get<std::string>());
  cfg.concepts = j.at("concepts").get<std::size_t>();
  cfg.dim = j.at("dim").get<std::size_t>();
  cfg.classes = j.at("classes").get<std::size_t>();
  cfg.layers = j.at("layers").get<std::size_t>();
  cfg.hidden = j.at("hidden").get<std::size_t>();
  cfg.concept_hidden = j.value("concept_hidden", std::size_t{0});
  cfg.ablate_graph = j.value("ablate_graph", false);
  cfg.graph_init_scale = j.value("graph_init_scale", 0.1);
  cfg.edge_threshold = j.value("edge_threshold", kDefaultEdgeThreshold);
  cfg.seed = j.value("seed", std::uint64_t{0});
  return cfg;
}

}  // namespace

std::string model_config_json(const ModelConfig& cfg) { return config_to_json(cfg).dump(); }

ModelConfig model_config_from_json(const std::string& text) {
  try {
    return config_from_json(json::parse(text));
  } catch (const json::exception& e) {
    throw ConfigError(std::string("invalid model config: ") + e.what());
  }
}

void save_checkpoint(const std::filesystem::path& path, const GraphCbmModel& model,
                     const std::string& config_echo_json) {
  const auto params = model.named_parameters();
  json header;
  header["model"] = config_to_json(model.config());
  json shapes = json::array();
  for (const auto& [name, t] : params) shapes.push_back({{"name", name}, {"rows", t.rows()}, {"cols", t.cols()}});
  header["parameters"] = shapes;
  try {
    header["config"] = json::parse(config_echo_json);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config echo is not valid JSON: ") + e.what());
  }
  const std::string text = header.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  out.write(kCheckpointMagic, 4);
  write_u16(out, kCheckpointVersion);
  write_u32(out, static_cast<std::uint32_t>(text.size()));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  write_u32(out, static_cast<std::uint32_t>(params.size()));
  for (const auto& [name, t] : params) {
    write_u32(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_matrix(out, t.value());
  }
  if (!out) throw FormatError("failed writing checkpoint " + path.string());
}

GraphCbmModel load_checkpoint(const std::filesystem::path& path, std::string* config_echo_json) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint " + path.string());
  const std::string ctx = path.string();
  char magic[4] = {};
  in.read(magic, 4);
  if (in.gcount() != 4) throw FormatError(ctx + ": truncated header");
  if (std::string(magic, 4) != std::string(kCheckpointMagic, 4)) throw FormatError(ctx + ": bad magic");
  const std::uint16_t version = read_u16(in, ctx);
  if (version != kCheckpointVersion) {
    throw FormatError(ctx + ": unsupported checkpoint version " + std::to_string(version));
  }
  const std::uint32_t len = read_u32(in, ctx);
  std::string text(len, '\0');
  in.read(text.data(), len);
  if (static_cast<std::uint32_t>(in.gcount()) != len) throw FormatError(ctx + ": truncated header JSON");
  json header;
  try {
    header = json::parse(text);
  } catch (const json::exception& e) {
    throw FormatError(ctx + ": corrupt header JSON: " + e.what());
  }
  const ModelConfig cfg = config_from_json(header.at("model"));

  const std::uint32_t count = read_u32(in, ctx);
  std::vector<std::pair<std::string, Matrix>> loaded;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t nlen = read_u32(in, ctx);
    std::string name(nlen, '\0');
    in.read(name.data(), nlen);
    if (static_cast<std::uint32_t>(in.gcount()) != nlen) throw FormatError(ctx + ": truncated parameter name");
    loaded.emplace_back(name, read_matrix(in, ctx + ":" + name));
  }

  if (loaded.empty() || loaded.front().first != "concepts") {
    throw FormatError(ctx + ": first parameter must be the concept table");
  }
  // Built from the stored concept table so label-free constants are exact.
  GraphCbmModel result(cfg, loaded.front().second);
  auto target = result.named_parameters();
  if (target.size() != loaded.size()) {
    throw FormatError(ctx + ": checkpoint has " + std::to_string(loaded.size()) +
                      " parameters, model expects " + std::to_string(target.size()));
  }
  for (std::size_t i = 0; i < target.size(); ++i) {
    if (target[i].first != loaded[i].first) {
      throw FormatError(ctx + ": parameter " + std::to_string(i) + " is '" + loaded[i].first +
                        "', expected '" + target[i].first + "'");
    }
    const Matrix& m = loaded[i].second;
    if (m.rows() != target[i].second.rows() || m.cols() != target[i].second.cols()) {
      throw FormatError(ctx + ": shape mismatch for " + loaded[i].first);
    }
    if (target[i].first == "concepts" && cfg.mode == Mode::label_free) continue;
    target[i].second.mutable_value() = m;
  }
  if (config_echo_json) *config_echo_json = header.value("config", json::object()).dump();
  return result;
}

}  // namespace gcbm
