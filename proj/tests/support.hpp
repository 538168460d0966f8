#pragma once

#include <atomic>
#include <cmath>
#include <filesystem>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "idreamrec/denoiser.hpp"
#include "idreamrec/embedding_space.hpp"

namespace idr::testing {

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

/// A vector whose dot product with row `s` beats every other row by at least `margin`
/// (margin perceptron). Returns an empty vector when row s is not separable in 10^4 rounds.
inline std::vector<double> separating_oracle(const EmbeddingMatrix& catalog, std::size_t s, double margin = 1.0) {
  std::vector<double> v(catalog.item(s).begin(), catalog.item(s).end());
  for (int round = 0; round < 10000; ++round) {
    std::size_t worst = s;
    double worst_gap = margin;
    const double self = dot(v, catalog.item(s));
    for (std::size_t j = 0; j < catalog.count(); ++j) {
      if (j == s) continue;
      const double gap = self - dot(v, catalog.item(j));
      if (gap < worst_gap) {
        worst_gap = gap;
        worst = j;
      }
    }
    if (worst == s) return v;
    for (std::size_t k = 0; k < v.size(); ++k) v[k] += catalog.item(s)[k] - catalog.item(worst)[k];
  }
  return {};
}

/// Denoiser that knows the transition rule: the condition is the last real history embedding,
/// and the prediction is a separating oracle for the successor of that item, whatever e_t is.
class RuleDenoiser : public Denoiser {
 public:
  RuleDenoiser(const EmbeddingMatrix& catalog, const std::vector<std::int64_t>& successor)
      : catalog_(catalog), successor_(successor) {
    for (std::size_t s = 0; s < catalog.count(); ++s) oracles_.push_back(separating_oracle(catalog, s));
  }

  std::size_t item_dim() const override { return catalog_.dim(); }
  std::size_t cond_dim() const override { return catalog_.dim(); }
  std::vector<double> cond_encode(const HistorySequence& h) const override {
    const auto row = h.embeddings.row(h.last_position());
    return {row.begin(), row.end()};
  }
  std::vector<double> unconditional() const override { return std::vector<double>(catalog_.dim(), 0.0); }
  std::vector<double> predict(std::span<const double>, int, std::span<const double> c) const override {
    ++calls;
    for (std::size_t i = 0; i < catalog_.count(); ++i) {
      const auto row = catalog_.item(i);
      if (std::equal(row.begin(), row.end(), c.begin(), c.end())) return oracles_[successor_[i]];
    }
    return unconditional();
  }
  bool separable() const {
    for (const auto& o : oracles_)
      if (o.empty()) return false;
    return true;
  }

  mutable std::atomic<std::size_t> calls{0};

 private:
  EmbeddingMatrix catalog_;
  std::vector<std::int64_t> successor_;
  std::vector<std::vector<double>> oracles_;
};

/// Fresh scratch directory under the system temp path, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() / ("idr_" + tag + "_" + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }
  std::string file(const std::string& name) const { return (path_ / name).string(); }

 private:
  std::filesystem::path path_;
};

}  // namespace idr::testing
