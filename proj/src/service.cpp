#include "gcbm/service.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <mutex>
#include <numeric>
#include <optional>
#include <random>
#include <shared_mutex>

#include <httplib.h>
#include <json.hpp>

#include "gcbm/analysis.hpp"
#include "gcbm/intervention.hpp"

namespace gcbm {

using json = nlohmann::json;
using Clock = std::chrono::steady_clock;

std::uint64_t fnv1a64(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : bytes) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

namespace {

// Client-side mistakes, mapped to an HTTP status.
struct HttpError {
  int status;
  std::string message;
  std::string field;
};

[[noreturn]] void fail(int status, std::string message, std::string field = "") {
  throw HttpError{status, std::move(message), std::move(field)};
}

struct Snapshot {
  GraphCbmModel model;
  EmbeddingDataset data;
  InterventionPrototypes prototypes;
  std::string graph_body;
  std::string graph_etag;
  std::vector<double> attribution_norms;  // ||row j of f2's first weight||_2
};

struct Session {
  std::string id;
  std::size_t sample_id = 0;
  std::map<std::size_t, double> edits;
  Clock::time_point created;
  Clock::time_point last_access;
};

json vec_json(std::span<const double> v) { return json(std::vector<double>(v.begin(), v.end())); }

json parse_body(const std::string& body) {
  json j;
  try {
    j = json::parse(body);
  } catch (const json::exception& e) {
    fail(400, std::string("malformed JSON body: ") + e.what(), "body");
  }
  if (!j.is_object()) fail(400, "request body must be a JSON object", "body");
  return j;
}

std::size_t index_field(const json& j, const char* name) {
  if (!j.contains(name)) fail(400, std::string("missing field '") + name + "'", name);
  const json& v = j.at(name);
  if (!v.is_number_integer() || v.get<long long>() < 0) {
    fail(400, std::string("field '") + name + "' must be a non-negative integer", name);
  }
  return v.get<std::size_t>();
}

}  // namespace

struct Service::Impl {
  ServiceConfig cfg;
  httplib::Server server;

  mutable std::shared_mutex snapshot_mutex;
  std::shared_ptr<const Snapshot> snapshot;

  mutable std::mutex session_mutex;
  std::map<std::string, Session> sessions;
  std::uint64_t next_session = 1;

  explicit Impl(ServiceConfig c) : cfg(c) { install_routes(); }

  std::shared_ptr<const Snapshot> current() const {
    std::shared_lock lock(snapshot_mutex);
    return snapshot;
  }

  std::shared_ptr<const Snapshot> require_loaded() const {
    auto s = current();
    if (!s) fail(503, "model not loaded");
    return s;
  }

  void purge_expired_locked(Clock::time_point now) {
    for (auto it = sessions.begin(); it != sessions.end();) {
      if (now - it->second.last_access > cfg.session_ttl) {
        it = sessions.erase(it);
      } else {
        ++it;
      }
    }
  }

  // ---- response builders ---------------------------------------------------

  json prediction_json(const Snapshot& s, const ForwardOutput& out, std::size_t row) const {
    const std::size_t k = s.model.config().concepts;
    const auto logits = out.logits.row(row);
    const double mx = *std::max_element(logits.begin(), logits.end());
    std::vector<double> probs(logits.size());
    double z = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) z += (probs[i] = std::exp(logits[i] - mx));
    for (double& p : probs) p /= z;

    const auto c_tilde = out.c_tilde.row(row);
    std::vector<std::size_t> activated;
    for (std::size_t j = 0; j < k; ++j)
      if (c_tilde[j] > 0.0) activated.push_back(j);

    std::vector<double> contribution(k);
    for (std::size_t j = 0; j < k; ++j) contribution[j] = std::abs(c_tilde[j]) * s.attribution_norms[j];
    std::vector<std::size_t> order(k);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return contribution[a] > contribution[b]; });
    json top = json::array();
    for (std::size_t t = 0; t < std::min(cfg.top_q, k); ++t) {
      const std::size_t j = order[t];
      top.push_back({{"concept", j}, {"name", s.data.concept_names[j]}, {"score", contribution[j]}});
    }
    return {{"y_hat", out.y_hat[row]},
            {"probabilities", probs},
            {"logits", vec_json(logits)},
            {"c", vec_json(out.c.row(row))},
            {"c_tilde", vec_json(c_tilde)},
            {"activated", activated},
            {"top_concepts", top}};
  }

  const Snapshot& check_sample(const Snapshot& s, std::size_t id) const {
    if (id >= s.data.size()) fail(404, "unknown sample_id " + std::to_string(id), "sample_id");
    return s;
  }

  Matrix sample_scores(const Snapshot& s, std::size_t id) const {
    Matrix x(1, s.data.dim());
    std::copy_n(s.data.images.row(id).begin(), s.data.dim(), x.row(0).begin());
    return s.model.initial_scores(x);
  }

  // ---- handlers ------------------------------------------------------------

  json handle_model() const {
    auto s = require_loaded();
    const ModelConfig& mc = s->model.config();
    json splits = json::object();
    for (const auto& [name, idx] : s->data.splits) splits[name] = idx.size();
    return {{"mode", to_string(mc.mode)},
            {"concepts", mc.concepts},
            {"dim", mc.dim},
            {"classes", mc.classes},
            {"layers", mc.layers},
            {"hidden", mc.hidden},
            {"edge_threshold", mc.edge_threshold},
            {"edge_count", union_pairs(extract_edges(s->model.graph())).size()},
            {"concept_names", s->data.concept_names},
            {"samples", s->data.size()},
            {"splits", splits},
            {"top_q", cfg.top_q}};
  }

  json handle_samples(const httplib::Request& req) const {
    auto s = require_loaded();
    auto int_param = [&](const char* name, std::size_t fallback) -> std::size_t {
      if (!req.has_param(name)) return fallback;
      const std::string v = req.get_param_value(name);
      if (v.empty() || !std::all_of(v.begin(), v.end(), [](char ch) { return ch >= '0' && ch <= '9'; }) ||
          v.size() > 9) {
        fail(400, std::string("query parameter '") + name + "' must be a non-negative integer", name);
      }
      return static_cast<std::size_t>(std::stoul(v));
    };
    const std::size_t page = int_param("page", 0);
    const std::size_t page_size = int_param("page_size", 50);
    if (page_size == 0 || page_size > cfg.max_page_size) {
      fail(400, "page_size must be in [1, " + std::to_string(cfg.max_page_size) + "]", "page_size");
    }
    std::vector<std::size_t> ids;
    std::string split = req.has_param("split") ? req.get_param_value("split") : "";
    if (split.empty()) {
      ids.resize(s->data.size());
      std::iota(ids.begin(), ids.end(), 0);
    } else {
      auto it = s->data.splits.find(split);
      if (it == s->data.splits.end()) fail(404, "unknown split '" + split + "'", "split");
      ids = it->second;
    }
    json samples = json::array();
    for (std::size_t i = page * page_size; i < std::min(ids.size(), (page + 1) * page_size); ++i) {
      samples.push_back({{"id", ids[i]}, {"label", s->data.labels[ids[i]]}});
    }
    return {{"split", split}, {"page", page}, {"page_size", page_size}, {"total", ids.size()}, {"samples", samples}};
  }

  json handle_predict(const std::string& body) const {
    auto s = require_loaded();
    const json j = parse_body(body);
    const bool has_id = j.contains("sample_id");
    const bool has_emb = j.contains("embedding");
    if (has_id == has_emb) fail(400, "exactly one of 'sample_id' or 'embedding' is required", "body");
    Matrix x(1, s->data.dim());
    json extra = json::object();
    if (has_id) {
      const std::size_t id = index_field(j, "sample_id");
      check_sample(*s, id);
      std::copy_n(s->data.images.row(id).begin(), s->data.dim(), x.row(0).begin());
      extra = {{"sample_id", id}, {"label", s->data.labels[id]}};
    } else {
      const json& e = j.at("embedding");
      if (!e.is_array()) fail(400, "field 'embedding' must be an array of numbers", "embedding");
      if (e.size() != s->data.dim()) {
        fail(400, "embedding has " + std::to_string(e.size()) + " entries, expected d=" + std::to_string(s->data.dim()),
             "embedding");
      }
      for (std::size_t i = 0; i < e.size(); ++i) {
        if (!e[i].is_number()) fail(400, "embedding entry " + std::to_string(i) + " is not a number", "embedding");
        x(0, i) = e[i].get<double>();
        if (!std::isfinite(x(0, i))) fail(400, "embedding entry " + std::to_string(i) + " is not finite", "embedding");
      }
    }
    json out = prediction_json(*s, s->model.predict(x), 0);
    out.update(extra);
    return out;
  }

  json handle_create_session(const std::string& body) {
    auto s = require_loaded();
    const json j = parse_body(body);
    const std::size_t id = index_field(j, "sample_id");
    check_sample(*s, id);
    const auto out = s->model.predict_from_scores(sample_scores(*s, id));
    std::lock_guard lock(session_mutex);
    const auto now = Clock::now();
    purge_expired_locked(now);
    Session session{"s" + std::to_string(next_session++), id, {}, now, now};
    sessions[session.id] = session;
    return {{"session", session.id},
            {"sample_id", id},
            {"label", s->data.labels[id]},
            {"prediction", prediction_json(*s, out, 0)}};
  }

  json handle_intervene(const std::string& body) {
    auto s = require_loaded();
    const json j = parse_body(body);
    if (!j.contains("session") || !j.at("session").is_string()) {
      fail(400, "field 'session' must be a string", "session");
    }
    const std::string sid = j.at("session").get<std::string>();
    const std::size_t k = s->model.config().concepts;

    std::map<std::size_t, double> new_edits;
    const bool has_edits = j.contains("edits");
    const bool has_policy = j.contains("policy");
    if (has_edits && has_policy) fail(400, "give either 'edits' or 'policy', not both", "body");
    if (has_edits) {
      const json& edits = j.at("edits");
      if (!edits.is_array()) fail(400, "field 'edits' must be an array", "edits");
      for (std::size_t e = 0; e < edits.size(); ++e) {
        const json& ed = edits[e];
        const std::string where = "edits[" + std::to_string(e) + "]";
        if (!ed.is_object()) fail(400, where + " must be an object", where);
        if (!ed.contains("concept") || !ed["concept"].is_number_integer() || ed["concept"].get<long long>() < 0 ||
            ed["concept"].get<std::size_t>() >= k) {
          fail(400, where + ".concept must be an integer in [0, " + std::to_string(k) + ")", where + ".concept");
        }
        if (!ed.contains("value") || !ed["value"].is_number() || !std::isfinite(ed["value"].get<double>())) {
          fail(400, where + ".value must be a finite number", where + ".value");
        }
        new_edits[ed["concept"].get<std::size_t>()] = ed["value"].get<double>();
      }
    }
    double ratio = 0.0;
    Policy policy = Policy::ucp;
    std::uint64_t seed = 0;
    if (has_policy) {
      if (!j.at("policy").is_string()) fail(400, "field 'policy' must be \"ucp\" or \"random\"", "policy");
      try {
        policy = policy_from_string(j.at("policy").get<std::string>());
      } catch (const ConfigError& e) {
        fail(400, e.what(), "policy");
      }
      if (!j.contains("ratio") || !j.at("ratio").is_number()) fail(400, "field 'ratio' must be a number", "ratio");
      ratio = j.at("ratio").get<double>();
      if (!(ratio >= 0.0 && ratio <= 1.0)) fail(400, "field 'ratio' must be in [0, 1]", "ratio");
      if (j.contains("seed")) {
        if (!j.at("seed").is_number_integer() || j.at("seed").get<long long>() < 0) {
          fail(400, "field 'seed' must be a non-negative integer", "seed");
        }
        seed = j.at("seed").get<std::uint64_t>();
      }
    }
    const bool reset = j.value("reset", false);

    std::size_t sample_id = 0;
    std::map<std::size_t, double> edits;
    {
      std::lock_guard lock(session_mutex);
      const auto now = Clock::now();
      purge_expired_locked(now);
      auto it = sessions.find(sid);
      if (it == sessions.end()) fail(404, "unknown session '" + sid + "'", "session");
      it->second.last_access = now;
      sample_id = it->second.sample_id;
      if (reset) it->second.edits.clear();
      edits = it->second.edits;
    }

    const Matrix c0 = sample_scores(*s, sample_id);
    const ForwardOutput before = s->model.predict_from_scores(c0);
    if (has_policy) {
      std::mt19937_64 rng(seed);
      const auto selected = select_concepts(c0.row(0), ratio, policy, rng);
      const std::span<const double> ann =
          s->data.has_annotations() ? s->data.annotations.row(sample_id) : std::span<const double>{};
      const int label = s->data.labels[sample_id];
      const auto row = intervene_row(s->model.mode(), c0.row(0), label, before.y_hat[0] != label, ann, s->prototypes,
                                     selected, kDefaultInterventionGamma);
      for (std::size_t jj = 0; jj < k; ++jj)
        if (row[jj] != c0(0, jj)) new_edits[jj] = row[jj];
    }
    for (const auto& [idx, v] : new_edits) edits[idx] = v;

    Matrix c1 = c0;
    for (const auto& [idx, v] : edits) c1(0, idx) = v;
    const ForwardOutput after = s->model.predict_from_scores(c1);
    {
      std::lock_guard lock(session_mutex);
      auto it = sessions.find(sid);
      if (it == sessions.end()) fail(404, "session '" + sid + "' was deleted concurrently", "session");
      it->second.edits = edits;
    }

    std::vector<double> delta(k);
    for (std::size_t jj = 0; jj < k; ++jj) delta[jj] = after.c_tilde(0, jj) - before.c_tilde(0, jj);
    json edits_j = json::array();
    for (const auto& [idx, v] : edits) edits_j.push_back({{"concept", idx}, {"value", v}});
    return {{"session", sid},
            {"sample_id", sample_id},
            {"label", s->data.labels[sample_id]},
            {"edits", edits_j},
            {"before", prediction_json(*s, before, 0)},
            {"after", prediction_json(*s, after, 0)},
            {"delta_c_tilde", delta}};
  }

  bool handle_delete(const std::string& sid) {
    std::lock_guard lock(session_mutex);
    purge_expired_locked(Clock::now());
    return sessions.erase(sid) > 0;
  }

  // ---- routing -------------------------------------------------------------

  template <typename Fn>
  static void respond(httplib::Response& res, Fn&& fn) {
    try {
      res.set_content(fn().dump(), "application/json");
      res.status = 200;
    } catch (const HttpError& e) {
      json err = {{"error", e.message}};
      if (!e.field.empty()) err["field"] = e.field;
      res.status = e.status;
      res.set_content(err.dump(), "application/json");
    } catch (const std::exception& e) {
      res.status = 500;
      res.set_content(json{{"error", e.what()}}.dump(), "application/json");
    }
  }

  void install_routes() {
    server.set_default_headers({{"Access-Control-Allow-Origin", "*"},
                                {"Access-Control-Allow-Headers", "Content-Type, If-None-Match"},
                                {"Access-Control-Allow-Methods", "GET, POST, DELETE, OPTIONS"},
                                {"Access-Control-Expose-Headers", "ETag"}});
    server.Options(R"(.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });

    server.Get("/model", [this](const httplib::Request&, httplib::Response& res) {
      respond(res, [&] { return handle_model(); });
    });
    server.Get("/graph", [this](const httplib::Request& req, httplib::Response& res) {
      auto s = current();
      if (!s) {
        res.status = 503;
        res.set_content(json{{"error", "model not loaded"}}.dump(), "application/json");
        return;
      }
      res.set_header("ETag", s->graph_etag);
      if (req.has_header("If-None-Match") && req.get_header_value("If-None-Match") == s->graph_etag) {
        res.status = 304;
        return;
      }
      res.status = 200;
      res.set_content(s->graph_body, "application/json");
    });
    server.Get("/dataset/samples", [this](const httplib::Request& req, httplib::Response& res) {
      respond(res, [&] { return handle_samples(req); });
    });
    server.Post("/predict", [this](const httplib::Request& req, httplib::Response& res) {
      respond(res, [&] { return handle_predict(req.body); });
    });
    server.Post("/session", [this](const httplib::Request& req, httplib::Response& res) {
      respond(res, [&] { return handle_create_session(req.body); });
    });
    server.Post("/intervene", [this](const httplib::Request& req, httplib::Response& res) {
      respond(res, [&] { return handle_intervene(req.body); });
    });
    server.Delete(R"(/session/([A-Za-z0-9_-]+))", [this](const httplib::Request& req, httplib::Response& res) {
      respond(res, [&] {
        const std::string sid = req.matches[1];
        if (!handle_delete(sid)) fail(404, "unknown session '" + sid + "'", "session");
        return json{{"deleted", sid}};
      });
    });
  }
};

Service::Service(ServiceConfig cfg) : impl_(std::make_unique<Impl>(cfg)) {}
Service::~Service() { stop(); }

void Service::load(GraphCbmModel model, EmbeddingDataset data) {
  data.validate();
  if (data.concept_count() != model.config().concepts || data.dim() != model.config().dim) {
    throw ConfigError("service: dataset (k=" + std::to_string(data.concept_count()) + ", d=" +
                      std::to_string(data.dim()) + ") does not match the model");
  }
  auto snap = std::make_shared<Snapshot>();
  snap->model = std::move(model);
  snap->data = std::move(data);
  if (snap->model.mode() == Mode::label_free) {
    const EmbeddingDataset proto_set = snap->data.has_split("val") ? snap->data.split("val") : snap->data;
    snap->prototypes = build_difference_prototypes(snap->model, proto_set);
  }
  snap->graph_body = graph_json(snap->model, snap->data.concept_names);
  char etag[24];
  std::snprintf(etag, sizeof etag, "\"%016llx\"", static_cast<unsigned long long>(fnv1a64(snap->graph_body)));
  snap->graph_etag = etag;
  const Tensor& w1 = snap->model.head().weight(0);
  snap->attribution_norms.resize(w1.rows());
  for (std::size_t j = 0; j < w1.rows(); ++j) {
    double ss = 0.0;
    for (double v : w1.value().row(j)) ss += v * v;
    snap->attribution_norms[j] = std::sqrt(ss);
  }
  std::unique_lock lock(impl_->snapshot_mutex);
  impl_->snapshot = std::move(snap);
}

bool Service::loaded() const { return impl_->current() != nullptr; }

bool Service::listen(const std::string& host, int port) { return impl_->server.listen(host, port); }
int Service::bind_to_any_port(const std::string& host) { return impl_->server.bind_to_any_port(host); }
bool Service::listen_after_bind() { return impl_->server.listen_after_bind(); }
void Service::wait_until_ready() const { impl_->server.wait_until_ready(); }
void Service::stop() {
  if (impl_ && impl_->server.is_running()) impl_->server.stop();
}

std::size_t Service::session_count() const {
  std::lock_guard lock(impl_->session_mutex);
  return impl_->sessions.size();
}

}  // namespace gcbm
