#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "idreamrec/matrix.hpp"

namespace idr {

/// Frozen item embedding table. Row i holds the embedding of item id i.
struct EmbeddingMatrix {
  Matrix vectors;

  std::size_t count() const { return vectors.rows; }
  std::size_t dim() const { return vectors.cols; }
  std::span<const double> item(std::size_t id) const { return vectors.row(id); }

  /// Throws kInvalidInput unless count >= 1, dim >= 2 and all entries are finite.
  void validate() const;
};

struct Moments {
  std::vector<double> mean;
  Matrix covariance;
};

struct SpectralDecomposition {
  Matrix basis;                          // columns are eigenvectors (O)
  std::vector<double> eigenvalues;       // descending, floored at eig_floor
  std::vector<double> raw_eigenvalues;   // descending, before flooring
  std::size_t floored_count = 0;
};

enum class TransformKind : std::uint8_t {
  kIdentity = 0,
  kScale = 1,
  kScaleOrtho = 2,
  kPcaWhiten = 3,
  kPcaWhitenO = 4,
  kZcaWhiten = 5,
};

const char* to_string(TransformKind kind);
/// Accepts "identity", "scale", "scale-ortho", "pca", "pca-o", "zca".
TransformKind parse_transform_kind(const std::string& name);
bool is_whitening(TransformKind kind);

/// Affine map e -> (e - offset) * matrix.
struct LinearTransform {
  TransformKind kind = TransformKind::kIdentity;
  std::vector<double> offset;
  Matrix matrix;
  // Number of eigenvalues lifted to the floor while fitting; not persisted.
  std::size_t floored_eigenvalues = 0;

  std::size_t dim() const { return offset.size(); }
};

inline constexpr double kDefaultEigFloor = 1e-8;

Moments compute_moments(const EmbeddingMatrix& e);

/// Cyclic Jacobi eigendecomposition of the covariance, sorted descending, with each
/// eigenvector's largest-magnitude entry made positive.
SpectralDecomposition spectral_decompose(const Moments& m, double eig_floor = kDefaultEigFloor);

LinearTransform fit_transform(const EmbeddingMatrix& e, TransformKind kind,
                              std::optional<double> scale = std::nullopt,
                              double eig_floor = kDefaultEigFloor);

std::vector<double> apply_transform(const LinearTransform& t, std::span<const double> e);
EmbeddingMatrix apply_transform(const LinearTransform& t, const EmbeddingMatrix& e);

std::string serialize_transform(const LinearTransform& t);
LinearTransform deserialize_transform(std::string_view bytes);
void save_transform(const LinearTransform& t, const std::string& path);
LinearTransform load_transform(const std::string& path);

}  // namespace idr
