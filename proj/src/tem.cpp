#include "idreamrec/tem.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <future>
#include <thread>

#include <httplib.h>
#include <json.hpp>

#include "idreamrec/binary_io.hpp"
#include "idreamrec/error.hpp"

namespace idr {

namespace {

constexpr std::string_view kEmbeddingMagic = "IDRE1";

void check_row_dims(const std::vector<std::vector<double>>& rows, std::size_t dim, const std::string& what) {
  for (const auto& r : rows) {
    if (r.size() != dim) {
      throw Error(ErrorCode::kInconsistentModel, what + ": vector of dimension " + std::to_string(r.size()) +
                                                     " alongside dimension " + std::to_string(dim));
    }
  }
}

}  // namespace

std::string serialize_embeddings(const EmbeddingMatrix& e, EmbeddingDType dtype) {
  ByteWriter w;
  w.put_bytes(kEmbeddingMagic);
  w.put_u32(static_cast<std::uint32_t>(e.dim()));
  w.put_u64(e.count());
  w.put_u8(static_cast<std::uint8_t>(dtype));
  for (double v : e.vectors.data) {
    if (dtype == EmbeddingDType::kF32) {
      w.put_f32(static_cast<float>(v));
    } else {
      w.put_f64(v);
    }
  }
  return w.take();
}

EmbeddingStore parse_embeddings(std::string_view bytes, const std::string& context) {
  ByteReader r(bytes, context);
  r.expect_magic(kEmbeddingMagic);
  EmbeddingStore s;
  s.path = context;
  s.dim = r.get_u32();
  s.count = r.get_u64();
  const std::uint8_t tag = r.get_u8();
  if (tag > 1) throw Error(ErrorCode::kCorruptFile, context + ": unknown dtype tag " + std::to_string(tag));
  s.dtype = static_cast<EmbeddingDType>(tag);
  if (s.dim == 0) throw Error(ErrorCode::kCorruptFile, context + ": zero dimension");
  const std::size_t width = s.dtype == EmbeddingDType::kF32 ? 4 : 8;
  if (s.count > r.remaining() / (s.dim * width)) {
    throw Error(ErrorCode::kCorruptFile, context + ": truncated (header promises " + std::to_string(s.count) +
                                             " rows of dimension " + std::to_string(s.dim) + ")");
  }
  s.matrix.vectors = Matrix(s.count, s.dim);
  for (double& v : s.matrix.vectors.data) {
    v = s.dtype == EmbeddingDType::kF32 ? static_cast<double>(r.get_f32()) : r.get_f64();
  }
  if (r.remaining() != 0) throw Error(ErrorCode::kCorruptFile, context + ": trailing bytes after data");
  for (std::size_t i = 0; i < s.count; ++i) {
    for (double v : s.matrix.vectors.row(i)) {
      if (!std::isfinite(v)) {
        throw Error(ErrorCode::kCorruptFile, context + ": non-finite value in row " + std::to_string(i));
      }
    }
  }
  return s;
}

EmbeddingStore load_embedding_store(const std::string& path) {
  EmbeddingStore s = parse_embeddings(read_file(path), path);
  s.path = path;
  return s;
}

EmbeddingMatrix load_embeddings(const std::string& path) { return load_embedding_store(path).matrix; }

void save_embeddings(const std::string& path, const EmbeddingMatrix& e, EmbeddingDType dtype) {
  write_file_atomic(path, serialize_embeddings(e, dtype));
}

void EmbedClientConfig::validate() const {
  if (batch_size < 1) throw Error(ErrorCode::kInvalidInput, "embedding batch size must be >= 1");
  if (max_retries < 0) throw Error(ErrorCode::kInvalidInput, "max retries must be >= 0");
  if (max_parallel < 1) throw Error(ErrorCode::kInvalidInput, "max parallel batches must be >= 1");
  if (!(backoff_base_ms >= 0.0)) throw Error(ErrorCode::kInvalidInput, "backoff base must be >= 0");
}

namespace {

class HttplibTransport final : public Transport {
 public:
  explicit HttplibTransport(double timeout) : timeout_(timeout) {}

  HttpResponse post_json(const std::string& url, const std::string& body,
                         const std::vector<std::pair<std::string, std::string>>& headers) override {
    const auto scheme_end = url.find("://");
    if (scheme_end == std::string::npos) throw Error(ErrorCode::kInvalidInput, "endpoint URL lacks a scheme: " + url);
    const auto path_start = url.find('/', scheme_end + 3);
    const std::string origin = url.substr(0, path_start);
    const std::string path = path_start == std::string::npos ? "/" : url.substr(path_start);

    httplib::Client cli(origin);
    const auto secs = static_cast<time_t>(timeout_);
    cli.set_connection_timeout(secs, 0);
    cli.set_read_timeout(secs, 0);
    httplib::Headers h;
    for (const auto& [k, v] : headers) h.emplace(k, v);
    auto res = cli.Post(path, h, body, "application/json");
    if (!res) return HttpResponse{0, httplib::to_string(res.error())};
    return HttpResponse{res->status, res->body};
  }

 private:
  double timeout_;
};

}  // namespace

std::shared_ptr<Transport> make_http_transport(double timeout_seconds) {
  return std::make_shared<HttplibTransport>(timeout_seconds);
}

std::string embedding_cache_key(std::string_view model, std::string_view text) {
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  const char sep = '\x1f';
  EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
  EVP_DigestUpdate(ctx, model.data(), model.size());
  EVP_DigestUpdate(ctx, &sep, 1);
  EVP_DigestUpdate(ctx, text.data(), text.size());
  EVP_DigestFinal_ex(ctx, digest, &len);
  EVP_MD_CTX_free(ctx);
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  out.reserve(2 * len);
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(kHex[digest[i] >> 4]);
    out.push_back(kHex[digest[i] & 0xf]);
  }
  return out;
}

EmbeddingClient::EmbeddingClient(EmbedClientConfig cfg, std::shared_ptr<Transport> transport, Sleeper sleeper)
    : cfg_(std::move(cfg)), transport_(std::move(transport)), sleeper_(std::move(sleeper)) {
  cfg_.validate();
  if (!sleeper_) {
    sleeper_ = [](double ms) { std::this_thread::sleep_for(std::chrono::duration<double, std::milli>(ms)); };
  }
  if (!cfg_.cache_dir.empty()) std::filesystem::create_directories(cfg_.cache_dir);
}

std::size_t EmbeddingClient::requests_sent() const {
  std::lock_guard lock(mu_);
  return requests_;
}

std::size_t EmbeddingClient::memory_cache_size() const {
  std::lock_guard lock(mu_);
  return memory_.size();
}

std::optional<std::vector<double>> EmbeddingClient::lookup(const std::string& key) {
  {
    std::lock_guard lock(mu_);
    if (auto it = memory_.find(key); it != memory_.end()) return it->second;
  }
  if (cfg_.cache_dir.empty()) return std::nullopt;
  const auto path = std::filesystem::path(cfg_.cache_dir) / (key + ".vec");
  if (!std::filesystem::exists(path)) return std::nullopt;
  EmbeddingStore s = parse_embeddings(read_file(path.string()), path.string());
  if (s.count != 1) throw Error(ErrorCode::kCorruptFile, path.string() + ": cache entry must hold one vector");
  std::vector<double> v(s.matrix.vectors.data.begin(), s.matrix.vectors.data.end());
  remember(key, v);
  return v;
}

void EmbeddingClient::remember(const std::string& key, const std::vector<double>& v) {
  std::lock_guard lock(mu_);
  if (cfg_.memory_cache_limit == 0 || memory_.count(key)) return;
  while (memory_.size() >= cfg_.memory_cache_limit) {
    memory_.erase(memory_order_.front());
    memory_order_.pop_front();
  }
  memory_.emplace(key, v);
  memory_order_.push_back(key);
}

std::vector<std::vector<double>> EmbeddingClient::request_batch(const std::vector<std::string>& batch) {
  const std::string body = nlohmann::json{{"model", cfg_.model}, {"input", batch}}.dump();
  std::vector<std::pair<std::string, std::string>> headers;
  if (!cfg_.api_key_env.empty()) {
    if (const char* key = std::getenv(cfg_.api_key_env.c_str()); key != nullptr && *key != '\0') {
      headers.emplace_back("Authorization", std::string("Bearer ") + key);
    }
  }

  HttpResponse last;
  for (int attempt = 0; attempt <= cfg_.max_retries; ++attempt) {
    if (attempt > 0) sleeper_(cfg_.backoff_base_ms * std::ldexp(1.0, attempt - 1));
    {
      std::lock_guard lock(mu_);
      ++requests_;
    }
    try {
      last = transport_->post_json(cfg_.endpoint, body, headers);
    } catch (const Error&) {
      throw;
    } catch (const std::exception& e) {
      last = HttpResponse{0, e.what()};
    }
    if (last.status == 200) break;
  }
  if (last.status != 200) {
    throw TransportError(last.status, "embedding endpoint failed after " + std::to_string(cfg_.max_retries + 1) +
                                          " attempts (last status " + std::to_string(last.status) + ")");
  }

  std::vector<std::vector<double>> out(batch.size());
  try {
    const auto j = nlohmann::json::parse(last.body);
    std::vector<bool> seen(batch.size(), false);
    for (const auto& item : j.at("data")) {
      const auto idx = item.at("index").get<std::int64_t>();
      if (idx < 0 || static_cast<std::size_t>(idx) >= batch.size() || seen[idx]) {
        throw Error(ErrorCode::kTransport, "embedding response has a bad or repeated index " + std::to_string(idx));
      }
      seen[idx] = true;
      out[idx] = item.at("embedding").get<std::vector<double>>();
      for (double v : out[idx]) {
        if (!std::isfinite(v)) throw Error(ErrorCode::kTransport, "embedding response holds a non-finite value");
      }
    }
    for (std::size_t i = 0; i < seen.size(); ++i) {
      if (!seen[i]) throw Error(ErrorCode::kTransport, "embedding response omits index " + std::to_string(i));
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kTransport, std::string("malformed embedding response: ") + e.what());
  }
  if (!out.empty()) check_row_dims(out, out.front().size(), "embedding response");
  return out;
}

EmbeddingMatrix EmbeddingClient::fetch(const std::vector<std::string>& texts) {
  std::vector<std::string> keys;
  keys.reserve(texts.size());
  for (const auto& t : texts) keys.push_back(embedding_cache_key(cfg_.model, t));

  std::map<std::string, std::vector<double>> resolved;
  std::vector<std::string> miss_texts;
  std::vector<std::string> miss_keys;
  for (std::size_t i = 0; i < texts.size(); ++i) {
    if (resolved.count(keys[i])) continue;
    if (auto v = lookup(keys[i])) {
      resolved.emplace(keys[i], std::move(*v));
    } else if (std::find(miss_keys.begin(), miss_keys.end(), keys[i]) == miss_keys.end()) {
      miss_keys.push_back(keys[i]);
      miss_texts.push_back(texts[i]);
    }
  }

  std::vector<std::vector<std::string>> batches;
  for (std::size_t i = 0; i < miss_texts.size(); i += cfg_.batch_size) {
    const auto end = std::min(miss_texts.size(), i + cfg_.batch_size);
    batches.emplace_back(miss_texts.begin() + static_cast<std::ptrdiff_t>(i),
                         miss_texts.begin() + static_cast<std::ptrdiff_t>(end));
  }
  std::vector<std::vector<std::vector<double>>> results(batches.size());
  for (std::size_t first = 0; first < batches.size(); first += cfg_.max_parallel) {
    const std::size_t last = std::min(batches.size(), first + cfg_.max_parallel);
    if (last - first == 1) {
      results[first] = request_batch(batches[first]);
      continue;
    }
    std::vector<std::future<std::vector<std::vector<double>>>> inflight;
    for (std::size_t b = first; b < last; ++b) {
      inflight.push_back(std::async(std::launch::async, [this, &batches, b] { return request_batch(batches[b]); }));
    }
    for (std::size_t b = first; b < last; ++b) results[b] = inflight[b - first].get();
  }

  std::size_t m = 0;
  for (const auto& batch : results) {
    for (const auto& v : batch) {
      const std::string& key = miss_keys[m++];
      if (!cfg_.cache_dir.empty()) {
        EmbeddingMatrix one{Matrix(1, v.size())};
        std::copy(v.begin(), v.end(), one.vectors.data.begin());
        write_file_atomic((std::filesystem::path(cfg_.cache_dir) / (key + ".vec")).string(),
                          serialize_embeddings(one));
      }
      remember(key, v);
      resolved.emplace(key, v);
    }
  }

  if (texts.empty()) return EmbeddingMatrix{Matrix(0, 0)};
  const std::size_t dim = resolved.at(keys.front()).size();
  EmbeddingMatrix out{Matrix(texts.size(), dim)};
  for (std::size_t i = 0; i < texts.size(); ++i) {
    const auto& v = resolved.at(keys[i]);
    if (v.size() != dim) {
      throw Error(ErrorCode::kInconsistentModel, "embedding dimension " + std::to_string(v.size()) +
                                                     " disagrees with " + std::to_string(dim));
    }
    std::copy(v.begin(), v.end(), out.vectors.row(i).begin());
  }
  return out;
}

EmbeddingMatrix fetch_embeddings(const std::vector<std::string>& texts, const EmbedClientConfig& cfg,
                                 std::shared_ptr<Transport> transport) {
  EmbeddingClient client(cfg, std::move(transport));
  return client.fetch(texts);
}

IntentionTable IntentionTable::load(const std::string& path) {
  IntentionTable t;
  try {
    const auto j = nlohmann::json::parse(read_file(path));
    for (const auto& [text, vec] : j.items()) t.vectors.emplace(text, vec.get<std::vector<double>>());
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kCorruptFile, path + ": " + e.what());
  }
  return t;
}

namespace {

std::vector<double> checked_intention(std::vector<double> v, std::size_t expected_dim) {
  if (v.size() != expected_dim) {
    throw Error(ErrorCode::kDimensionMismatch, "intention embedding has dimension " + std::to_string(v.size()) +
                                                   ", item store has " + std::to_string(expected_dim));
  }
  return v;
}

void reject_empty(const std::string& text) {
  if (text.empty()) throw Error(ErrorCode::kInvalidInput, "intention text is empty");
}

}  // namespace

std::vector<double> embed_intention(const std::string& text, EmbeddingClient& client, std::size_t expected_dim) {
  reject_empty(text);
  const EmbeddingMatrix m = client.fetch({text});
  return checked_intention(std::vector<double>(m.vectors.data.begin(), m.vectors.data.end()), expected_dim);
}

std::vector<double> embed_intention(const std::string& text, const IntentionTable& table, std::size_t expected_dim) {
  reject_empty(text);
  const auto it = table.vectors.find(text);
  if (it == table.vectors.end()) throw Error(ErrorCode::kInvalidInput, "no embedding for intention text: " + text);
  return checked_intention(it->second, expected_dim);
}

std::string compose_item_text(const std::vector<std::string>& fields) {
  std::string out;
  for (const auto& f : fields) {
    if (f.empty()) continue;
    if (!out.empty()) out += "::";
    out += f;
  }
  return out;
}

}  // namespace idr
