#pragma once

// HTTP/JSON inference and intervention service over one loaded model.
//
//   GET    /model                    metadata
//   GET    /graph                    graph JSON, ETag / If-None-Match
//   GET    /dataset/samples          ?split=&page=&page_size=
//   POST   /predict                  {"sample_id"} | {"embedding": [...]}
//   POST   /session                  {"sample_id"}
//   POST   /intervene                {"session", "edits": [{"concept", "value"}]}
//                                    | {"session", "policy", "ratio", "seed"}
//   DELETE /session/{id}
//
// Every endpoint except DELETE answers 503 until load() has run.

#include <chrono>
#include <cstdint>
#include <memory>
#include <string>

#include "gcbm/data_io.hpp"
#include "gcbm/model.hpp"

namespace gcbm {

struct ServiceConfig {
  std::chrono::seconds session_ttl{30 * 60};
  std::size_t top_q = 10;
  std::size_t max_page_size = 1000;
};

// FNV-1a 64-bit, used for ETags.
std::uint64_t fnv1a64(const std::string& bytes);

class Service {
 public:
  explicit Service(ServiceConfig cfg = {});
  ~Service();
  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  // Installs an immutable snapshot; `data` supplies samples, concept names
  // and intervention prototypes (built on its "val" split when present).
  void load(GraphCbmModel model, EmbeddingDataset data);
  bool loaded() const;

  // Blocking; returns false if the socket could not be bound.
  bool listen(const std::string& host, int port);
  // Binds an ephemeral port and returns it (or -1); serve with listen_after_bind().
  int bind_to_any_port(const std::string& host);
  bool listen_after_bind();
  void wait_until_ready() const;
  void stop();

  std::size_t session_count() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace gcbm
