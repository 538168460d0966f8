#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "idreamrec/embedding_space.hpp"

namespace idr {

enum class EmbeddingDType : std::uint8_t { kF32 = 0, kF64 = 1 };

/// File layout: "IDRE1", u32 d, u64 count, u8 dtype, then count*d row-major values.
struct EmbeddingStore {
  std::string path;
  std::size_t dim = 0;
  std::size_t count = 0;
  EmbeddingDType dtype = EmbeddingDType::kF64;
  EmbeddingMatrix matrix;
};

std::string serialize_embeddings(const EmbeddingMatrix& e, EmbeddingDType dtype = EmbeddingDType::kF64);
EmbeddingStore parse_embeddings(std::string_view bytes, const std::string& context = "embeddings");
EmbeddingStore load_embedding_store(const std::string& path);
EmbeddingMatrix load_embeddings(const std::string& path);
void save_embeddings(const std::string& path, const EmbeddingMatrix& e, EmbeddingDType dtype = EmbeddingDType::kF64);

struct EmbedClientConfig {
  std::string endpoint;  // full URL of the embeddings route
  std::string model;
  std::size_t batch_size = 64;
  int max_retries = 3;
  double backoff_base_ms = 200.0;
  std::string cache_dir;  // empty disables the disk cache
  std::string api_key_env = "IDR_EMBED_API_KEY";
  std::size_t max_parallel = 1;           // concurrent batches in flight
  std::size_t memory_cache_limit = 4096;  // vectors kept in memory

  void validate() const;
};

struct HttpResponse {
  int status = 0;  // 0 when no response arrived
  std::string body;
};

/// Blocking POST of a JSON body; must be safe to call from several threads.
class Transport {
 public:
  virtual ~Transport() = default;
  virtual HttpResponse post_json(const std::string& url, const std::string& body,
                                 const std::vector<std::pair<std::string, std::string>>& headers) = 0;
};

std::shared_ptr<Transport> make_http_transport(double timeout_seconds = 30.0);

/// Hex SHA-256 of the model name, a 0x1f separator and the text.
std::string embedding_cache_key(std::string_view model, std::string_view text);

/// Cached, batched, retrying client for a remote text-embedding endpoint.
class EmbeddingClient {
 public:
  using Sleeper = std::function<void(double milliseconds)>;

  EmbeddingClient(EmbedClientConfig cfg, std::shared_ptr<Transport> transport, Sleeper sleeper = {});

  /// Rows follow the order of `texts`; duplicates map to identical rows.
  EmbeddingMatrix fetch(const std::vector<std::string>& texts);

  const EmbedClientConfig& config() const { return cfg_; }
  std::size_t requests_sent() const;
  std::size_t memory_cache_size() const;

 private:
  std::optional<std::vector<double>> lookup(const std::string& key);
  void remember(const std::string& key, const std::vector<double>& v);
  std::vector<std::vector<double>> request_batch(const std::vector<std::string>& batch);

  EmbedClientConfig cfg_;
  std::shared_ptr<Transport> transport_;
  Sleeper sleeper_;
  mutable std::mutex mu_;
  std::unordered_map<std::string, std::vector<double>> memory_;
  std::deque<std::string> memory_order_;
  std::size_t requests_ = 0;
};

EmbeddingMatrix fetch_embeddings(const std::vector<std::string>& texts, const EmbedClientConfig& cfg,
                                 std::shared_ptr<Transport> transport);

/// Precomputed intention vectors keyed by exact text. JSON file: {"text": [numbers], ...}.
struct IntentionTable {
  std::map<std::string, std::vector<double>> vectors;
  static IntentionTable load(const std::string& path);
};

std::vector<double> embed_intention(const std::string& text, EmbeddingClient& client, std::size_t expected_dim);
std::vector<double> embed_intention(const std::string& text, const IntentionTable& table, std::size_t expected_dim);

/// Joins non-empty fields with "::" in the order given.
std::string compose_item_text(const std::vector<std::string>& fields);

}  // namespace idr
