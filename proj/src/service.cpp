#include "idreamrec/service.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <httplib.h>
#include <json.hpp>

#include "idreamrec/error.hpp"
#include "idreamrec/generation.hpp"

namespace idr {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string resolve_against(const std::string& ref, const std::string& checkpoint_path) {
  if (ref.empty()) return ref;
  const fs::path p(ref);
  if (p.is_absolute()) return ref;
  return (fs::path(checkpoint_path).parent_path() / p).lexically_normal().string();
}

ApiReply error_reply(int status, const std::string& message) {
  return ApiReply{status, json{{"error", message}}.dump()};
}

}  // namespace

ModelBundle load_bundle(const std::string& checkpoint_path, const std::string& embeddings_override,
                        const std::string& transform_override) {
  Checkpoint ck = load_checkpoint(checkpoint_path);
  const std::string emb_path =
      embeddings_override.empty() ? resolve_against(ck.embeddings_path, checkpoint_path) : embeddings_override;
  const std::string tr_path =
      transform_override.empty() ? resolve_against(ck.transform_path, checkpoint_path) : transform_override;
  if (emb_path.empty()) throw Error(ErrorCode::kInvalidInput, "checkpoint names no embedding file");

  const EmbeddingStore raw = load_embedding_store(emb_path);
  LinearTransform tr;
  if (tr_path.empty()) {
    tr.kind = TransformKind::kIdentity;
    tr.offset.assign(raw.dim, 0.0);
    tr.matrix = Matrix::identity(raw.dim);
  } else {
    tr = load_transform(tr_path);
  }
  if (tr.dim() != raw.dim) {
    throw Error(ErrorCode::kDimensionMismatch, "transform dimension " + std::to_string(tr.dim()) +
                                                   " vs embedding dimension " + std::to_string(raw.dim));
  }
  if (ck.model.item_dim() != raw.dim) {
    throw Error(ErrorCode::kDimensionMismatch, "checkpoint item dimension " + std::to_string(ck.model.item_dim()) +
                                                   " vs embedding dimension " + std::to_string(raw.dim));
  }
  EmbeddingMatrix catalog = apply_transform(tr, raw.matrix);
  const auto pad = static_cast<std::int64_t>(catalog.count());
  return ModelBundle{std::move(ck.model), std::move(ck.schedule), std::move(tr), std::move(catalog), pad, ck.seed};
}

std::map<std::int64_t, std::string> load_titles(const std::string& path) {
  std::map<std::int64_t, std::string> titles;
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIo, "cannot open titles file " + path);
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const auto tab = line.find('\t');
    if (line.empty() || tab == std::string::npos) continue;
    try {
      titles[std::stoll(line.substr(0, tab))] = line.substr(tab + 1);
    } catch (const std::exception&) {
      continue;  // header or comment line
    }
  }
  return titles;
}

std::uint64_t request_seed(const std::string& canonical_json) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : canonical_json) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

RecommendService::RecommendService(std::shared_ptr<const ModelBundle> bundle, std::map<std::int64_t, std::string> titles,
                                   IntentionResolver intentions)
    : bundle_(std::move(bundle)), titles_(std::move(titles)), intentions_(std::move(intentions)) {}

ApiReply RecommendService::health() const { return ApiReply{200, json{{"status", "ok"}}.dump()}; }

ApiReply RecommendService::items(std::size_t limit) const {
  json arr = json::array();
  const std::size_t n = std::min(limit, bundle_->catalog.count());
  for (std::size_t i = 0; i < n; ++i) {
    json item{{"id", i}};
    if (auto it = titles_.find(static_cast<std::int64_t>(i)); it != titles_.end()) item["title"] = it->second;
    arr.push_back(std::move(item));
  }
  return ApiReply{200, json{{"items", std::move(arr)}, {"total", bundle_->catalog.count()}}.dump()};
}

ApiReply RecommendService::recommend(const std::string& body) const {
  const auto started = std::chrono::steady_clock::now();
  const ModelBundle& b = *bundle_;

  json req;
  try {
    req = json::parse(body);
  } catch (const json::parse_error& e) {
    return error_reply(400, std::string("malformed JSON: ") + e.what());
  }
  if (!req.is_object()) return error_reply(400, "request body must be a JSON object");

  std::vector<std::int64_t> history;
  std::optional<std::string> intention_text;
  double rho = 0.0, w = 0.0;
  std::int64_t steps = 1, k = 10;
  std::optional<std::uint64_t> seed;
  try {
    if (req.contains("history")) history = req.at("history").get<std::vector<std::int64_t>>();
    if (req.contains("intention_text") && !req.at("intention_text").is_null()) {
      intention_text = req.at("intention_text").get<std::string>();
    }
    if (req.contains("rho")) rho = req.at("rho").get<double>();
    if (req.contains("w")) w = req.at("w").get<double>();
    if (req.contains("steps")) steps = req.at("steps").get<std::int64_t>();
    if (req.contains("k")) k = req.at("k").get<std::int64_t>();
    if (req.contains("seed") && !req.at("seed").is_null()) seed = req.at("seed").get<std::uint64_t>();
  } catch (const json::exception& e) {
    return error_reply(400, std::string("bad field type: ") + e.what());
  }

  if (k < 1) return error_reply(422, "k must be >= 1");
  if (steps < 1 || steps > b.schedule.steps) {
    return error_reply(422, "steps must be in [1, " + std::to_string(b.schedule.steps) + "]");
  }
  if (!std::isfinite(rho) || rho < 0.0) return error_reply(422, "rho must be finite and >= 0");
  if (!std::isfinite(w)) return error_reply(422, "w must be finite");
  for (auto id : history) {
    if (id < 0 || id >= b.pad_id) return error_reply(422, "unknown item id " + std::to_string(id));
  }
  if (!seed) {
    json canon = req;
    canon.erase("seed");
    seed = request_seed(canon.dump());
  }

  const std::size_t slots = b.model.config().history_len;
  std::vector<std::int64_t> padded(slots, b.pad_id);
  const std::size_t used = std::min(slots, history.size());
  std::copy(history.end() - static_cast<std::ptrdiff_t>(used), history.end(),
            padded.end() - static_cast<std::ptrdiff_t>(used));

  GuidanceRequest g;
  g.history = make_history(padded, b.catalog, b.pad_id);
  g.rho = rho;
  g.w = w;
  g.k = static_cast<std::size_t>(std::min<std::int64_t>(k, static_cast<std::int64_t>(b.catalog.count())));
  g.seed = *seed;
  g.plan = make_plan(b.schedule.steps, static_cast<int>(steps));
  if (intention_text && !intention_text->empty() && rho != 0.0) {
    if (!intentions_) return error_reply(422, "intention text given but no intention embeddings are configured");
    try {
      g.intention = apply_transform(b.transform, intentions_(*intention_text));
    } catch (const TransportError& e) {
      return error_reply(502, e.what());
    } catch (const Error& e) {
      return error_reply(422, e.what());
    }
    if (g.intention->size() != b.catalog.dim()) return error_reply(422, "intention embedding dimension mismatch");
  }

  const std::vector<double> oracle = generate_oracle(b.model, b.schedule, g);
  const RankedResult ranked = ground_topk(oracle, b.catalog, g.k);
  double norm = 0.0;
  for (double v : oracle) norm += v * v;

  json items = json::array();
  for (std::size_t i = 0; i < ranked.items.size(); ++i) {
    json item{{"id", ranked.items[i]}, {"score", ranked.scores[i]}};
    if (auto it = titles_.find(ranked.items[i]); it != titles_.end()) item["title"] = it->second;
    items.push_back(std::move(item));
  }
  const double ms =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - started).count();
  json resp{{"items", std::move(items)}, {"oracle_norm", std::sqrt(norm)}, {"seed", *seed}, {"timing_ms", ms}};
  return ApiReply{200, resp.dump()};
}

struct HttpServer::Impl {
  std::shared_ptr<const RecommendService> service;
  httplib::Server server;
  std::thread thread;
};

HttpServer::HttpServer(std::shared_ptr<const RecommendService> service) : impl_(std::make_unique<Impl>()) {
  impl_->service = std::move(service);
  auto& srv = impl_->server;
  const auto svc = impl_->service;
  auto send = [](httplib::Response& res, const ApiReply& r) {
    res.status = r.status;
    res.set_content(r.body, "application/json");
  };
  srv.set_default_headers({{"Access-Control-Allow-Origin", "*"},
                           {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"},
                           {"Access-Control-Allow-Headers", "Content-Type"}});
  srv.Options(R"(/.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });
  srv.Get("/health", [svc, send](const httplib::Request&, httplib::Response& res) { send(res, svc->health()); });
  srv.Get("/items", [svc, send](const httplib::Request& req, httplib::Response& res) {
    std::size_t limit = 100;
    if (req.has_param("limit")) {
      try {
        const long long v = std::stoll(req.get_param_value("limit"));
        if (v < 0) throw std::invalid_argument("negative");
        limit = static_cast<std::size_t>(v);
      } catch (const std::exception&) {
        send(res, ApiReply{400, json{{"error", "limit must be a non-negative integer"}}.dump()});
        return;
      }
    }
    send(res, svc->items(limit));
  });
  srv.Post("/recommend", [svc, send](const httplib::Request& req, httplib::Response& res) {
    try {
      send(res, svc->recommend(req.body));
    } catch (const std::exception& e) {
      send(res, ApiReply{500, json{{"error", e.what()}}.dump()});
    }
  });
}

HttpServer::~HttpServer() { stop(); }

int HttpServer::start(const std::string& host, int port) {
  auto& srv = impl_->server;
  int bound = port;
  if (port == 0) {
    bound = srv.bind_to_any_port(host);
  } else if (!srv.bind_to_port(host, port)) {
    bound = -1;
  }
  if (bound < 0) throw Error(ErrorCode::kIo, "cannot bind " + host + ":" + std::to_string(port));
  impl_->thread = std::thread([&srv] { srv.listen_after_bind(); });
  srv.wait_until_ready();
  return bound;
}

void HttpServer::wait() {
  if (impl_->thread.joinable()) impl_->thread.join();
}

void HttpServer::stop() {
  if (!impl_) return;
  impl_->server.stop();
  if (impl_->thread.joinable()) impl_->thread.join();
}

}  // namespace idr
