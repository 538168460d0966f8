#pragma once

#include <atomic>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "idreamrec/denoiser.hpp"
#include "idreamrec/diffusion.hpp"
#include "idreamrec/embedding_space.hpp"
#include "idreamrec/tem.hpp"
#include "idreamrec/training.hpp"

namespace idr {

/// Maps intention text to a raw (untransformed) embedding.
using IntentionResolver = std::function<std::vector<double>(const std::string& text)>;

/// Everything a recommendation needs, loaded once and never mutated.
struct ModelBundle {
  DenoiserModel model;
  NoiseSchedule schedule;
  LinearTransform transform;
  EmbeddingMatrix catalog;  // transformed
  std::int64_t pad_id = 0;
  std::uint64_t seed = 0;
};

/// Loads the checkpoint plus the embeddings and transform it references; relative
/// references resolve against the checkpoint's directory. Overrides replace them.
ModelBundle load_bundle(const std::string& checkpoint_path, const std::string& embeddings_override = "",
                        const std::string& transform_override = "");

/// Optional `id<TAB>title` sidecar.
std::map<std::int64_t, std::string> load_titles(const std::string& path);

struct ApiReply {
  int status = 200;
  std::string body;  // JSON
};

class RecommendService {
 public:
  RecommendService(std::shared_ptr<const ModelBundle> bundle, std::map<std::int64_t, std::string> titles = {},
                   IntentionResolver intentions = {});

  ApiReply health() const;
  ApiReply items(std::size_t limit) const;
  ApiReply recommend(const std::string& body) const;

  const ModelBundle& bundle() const { return *bundle_; }

 private:
  std::shared_ptr<const ModelBundle> bundle_;
  std::map<std::int64_t, std::string> titles_;
  IntentionResolver intentions_;
};

/// Seed used when a request omits one: FNV-1a of the canonical request JSON.
std::uint64_t request_seed(const std::string& canonical_json);

/// HTTP front end; runs the listener on a background thread.
class HttpServer {
 public:
  explicit HttpServer(std::shared_ptr<const RecommendService> service);
  ~HttpServer();
  HttpServer(const HttpServer&) = delete;
  HttpServer& operator=(const HttpServer&) = delete;

  /// Binds and starts listening; port 0 picks a free port. Returns the bound port.
  int start(const std::string& host, int port);
  /// Blocks until stop() is called or the listener fails.
  void wait();
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace idr
