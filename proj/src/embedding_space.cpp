#include "idreamrec/embedding_space.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "idreamrec/binary_io.hpp"
#include "idreamrec/error.hpp"
#include "idreamrec/kernels.hpp"

namespace idr {

namespace {

constexpr int kMaxJacobiSweeps = 100;
constexpr double kJacobiTolerance = 1e-12;
constexpr double kSymmetryTolerance = 1e-10;
constexpr std::string_view kTransformMagic = "IDRT1";

double off_diagonal_norm(const Matrix& a) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.rows; ++i)
    for (std::size_t j = 0; j < a.cols; ++j)
      if (i != j) acc += a(i, j) * a(i, j);
  return std::sqrt(acc);
}

// Cyclic Jacobi: repeatedly annihilate each off-diagonal pair with a plane rotation.
void jacobi_eigen(Matrix a, Matrix& vectors, std::vector<double>& values) {
  const std::size_t n = a.rows;
  vectors = Matrix::identity(n);
  const double scale = std::max(1.0, std::sqrt(std::inner_product(a.data.begin(), a.data.end(),
                                                                  a.data.begin(), 0.0)));
  for (int sweep = 0; sweep < kMaxJacobiSweeps; ++sweep) {
    if (off_diagonal_norm(a) < kJacobiTolerance * scale) break;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (apq == 0.0) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
        const double t = (theta >= 0.0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a(k, p), akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a(p, k), aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = vectors(k, p), vkq = vectors(k, q);
          vectors(k, p) = c * vkp - s * vkq;
          vectors(k, q) = s * vkp + c * vkq;
        }
      }
    }
  }
  values.resize(n);
  for (std::size_t i = 0; i < n; ++i) values[i] = a(i, i);
}

Matrix scaled_columns(const Matrix& m, const std::vector<double>& factors) {
  Matrix out = m;
  for (std::size_t i = 0; i < m.rows; ++i)
    for (std::size_t j = 0; j < m.cols; ++j) out(i, j) *= factors[j];
  return out;
}

}  // namespace

void EmbeddingMatrix::validate() const {
  if (count() < 1) throw Error(ErrorCode::kInvalidInput, "embedding matrix has no rows");
  if (dim() < 2) throw Error(ErrorCode::kInvalidInput, "embedding dimension must be >= 2");
  if (vectors.data.size() != count() * dim()) {
    throw Error(ErrorCode::kInvalidInput, "embedding storage does not match its shape");
  }
  for (std::size_t i = 0; i < count(); ++i)
    for (double v : item(i))
      if (!std::isfinite(v)) {
        throw Error(ErrorCode::kInvalidInput, "non-finite entry in embedding row " + std::to_string(i));
      }
}

const char* to_string(TransformKind kind) {
  switch (kind) {
    case TransformKind::kIdentity: return "identity";
    case TransformKind::kScale: return "scale";
    case TransformKind::kScaleOrtho: return "scale-ortho";
    case TransformKind::kPcaWhiten: return "pca";
    case TransformKind::kPcaWhitenO: return "pca-o";
    case TransformKind::kZcaWhiten: return "zca";
  }
  return "unknown";
}

TransformKind parse_transform_kind(const std::string& name) {
  for (auto k : {TransformKind::kIdentity, TransformKind::kScale, TransformKind::kScaleOrtho,
                 TransformKind::kPcaWhiten, TransformKind::kPcaWhitenO, TransformKind::kZcaWhiten}) {
    if (name == to_string(k)) return k;
  }
  throw Error(ErrorCode::kInvalidInput, "unknown transform kind '" + name + "'");
}

bool is_whitening(TransformKind kind) {
  return kind == TransformKind::kPcaWhiten || kind == TransformKind::kPcaWhitenO ||
         kind == TransformKind::kZcaWhiten;
}

Moments compute_moments(const EmbeddingMatrix& e) {
  const std::size_t n = e.count();
  const std::size_t d = e.dim();
  if (n < 2) throw Error(ErrorCode::kDegenerateInput, "moments need at least 2 rows");

  Moments m;
  m.mean.assign(d, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) m.mean[j] += e.vectors(i, j);
  for (double& v : m.mean) v /= static_cast<double>(n);

  Matrix cov(d, d);
  std::vector<double> centered(d);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) centered[j] = e.vectors(i, j) - m.mean[j];
    for (std::size_t a = 0; a < d; ++a)
      for (std::size_t b = 0; b < d; ++b) cov(a, b) += centered[a] * centered[b];
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  m.covariance = Matrix(d, d);
  for (std::size_t a = 0; a < d; ++a)
    for (std::size_t b = 0; b < d; ++b) m.covariance(a, b) = 0.5 * (cov(a, b) + cov(b, a)) * inv_n;
  return m;
}

SpectralDecomposition spectral_decompose(const Moments& m, double eig_floor) {
  const Matrix& c = m.covariance;
  if (c.rows != c.cols || c.rows == 0) throw Error(ErrorCode::kInvalidInput, "covariance must be square");
  double max_abs = 1.0;
  for (double v : c.data) max_abs = std::max(max_abs, std::abs(v));
  for (std::size_t i = 0; i < c.rows; ++i)
    for (std::size_t j = i + 1; j < c.cols; ++j)
      if (std::abs(c(i, j) - c(j, i)) > kSymmetryTolerance * max_abs) {
        throw Error(ErrorCode::kInvalidInput, "covariance is not symmetric");
      }

  Matrix vectors;
  std::vector<double> values;
  jacobi_eigen(c, vectors, values);

  const std::size_t n = values.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return values[a] > values[b]; });

  SpectralDecomposition out;
  out.basis = Matrix(n, n);
  out.raw_eigenvalues.resize(n);
  out.eigenvalues.resize(n);
  for (std::size_t col = 0; col < n; ++col) {
    const std::size_t src = order[col];
    std::size_t pivot = 0;
    for (std::size_t r = 1; r < n; ++r)
      if (std::abs(vectors(r, src)) > std::abs(vectors(pivot, src))) pivot = r;
    const double sign = vectors(pivot, src) < 0.0 ? -1.0 : 1.0;
    for (std::size_t r = 0; r < n; ++r) out.basis(r, col) = sign * vectors(r, src);
    out.raw_eigenvalues[col] = values[src];
    if (values[src] < eig_floor) {
      out.eigenvalues[col] = eig_floor;
      ++out.floored_count;
    } else {
      out.eigenvalues[col] = values[src];
    }
  }
  return out;
}

LinearTransform fit_transform(const EmbeddingMatrix& e, TransformKind kind, std::optional<double> scale,
                              double eig_floor) {
  e.validate();
  const std::size_t d = e.dim();
  LinearTransform t;
  t.kind = kind;

  if (kind == TransformKind::kScale || kind == TransformKind::kScaleOrtho) {
    if (!scale || !(*scale > 0.0) || !std::isfinite(*scale)) {
      throw Error(ErrorCode::kInvalidInput, "scale transforms require a > 0");
    }
  }

  if (kind == TransformKind::kIdentity || kind == TransformKind::kScale) {
    t.offset.assign(d, 0.0);
    t.matrix = Matrix::identity(d);
    if (kind == TransformKind::kScale)
      for (std::size_t i = 0; i < d; ++i) t.matrix(i, i) = *scale;
    return t;
  }

  const Moments m = compute_moments(e);
  const SpectralDecomposition sd = spectral_decompose(m, eig_floor);

  if (kind == TransformKind::kScaleOrtho) {
    t.offset.assign(d, 0.0);
    t.matrix = sd.basis;
    for (double& v : t.matrix.data) v *= *scale;
    return t;
  }

  const double largest = std::max(sd.eigenvalues.front(), 0.0);
  std::vector<double> inv_sqrt(d);
  for (std::size_t i = 0; i < d; ++i) {
    const double lambda = sd.eigenvalues[i];
    if (lambda <= 0.0 || (eig_floor <= 0.0 && lambda <= 1e-12 * largest)) {
      throw Error(ErrorCode::kSingularTransform,
                  "covariance is rank-deficient; use a positive eigenvalue floor");
    }
    inv_sqrt[i] = 1.0 / std::sqrt(lambda);
  }
  t.offset = m.mean;
  t.floored_eigenvalues = sd.floored_count;
  const Matrix pca = scaled_columns(sd.basis, inv_sqrt);
  switch (kind) {
    case TransformKind::kPcaWhiten: t.matrix = pca; break;
    case TransformKind::kPcaWhitenO: t.matrix = matmul(pca, sd.basis); break;
    case TransformKind::kZcaWhiten: t.matrix = matmul(pca, transpose(sd.basis)); break;
    default: break;
  }
  return t;
}

std::vector<double> apply_transform(const LinearTransform& t, std::span<const double> e) {
  if (e.size() != t.dim()) {
    throw Error(ErrorCode::kDimensionMismatch, "vector has dim " + std::to_string(e.size()) +
                                                   ", transform expects " + std::to_string(t.dim()));
  }
  const std::size_t d = t.dim();
  std::vector<double> centered(d);
  for (std::size_t k = 0; k < d; ++k) centered[k] = e[k] - t.offset[k];
  std::vector<double> out(t.matrix.cols, 0.0);
  for (std::size_t j = 0; j < t.matrix.cols; ++j) {
    double acc = 0.0;
    for (std::size_t k = 0; k < d; ++k) acc += centered[k] * t.matrix(k, j);
    out[j] = acc;
  }
  return out;
}

EmbeddingMatrix apply_transform(const LinearTransform& t, const EmbeddingMatrix& e) {
  if (e.dim() != t.dim()) {
    throw Error(ErrorCode::kDimensionMismatch, "embedding dim " + std::to_string(e.dim()) +
                                                   " does not match transform dim " + std::to_string(t.dim()));
  }
  EmbeddingMatrix out;
  out.vectors = Matrix(e.count(), t.matrix.cols);
  kernels::omp::affine_rows(e.vectors, t.offset, t.matrix, out.vectors);
  return out;
}

std::string serialize_transform(const LinearTransform& t) {
  ByteWriter w;
  w.put_bytes(kTransformMagic);
  w.put_u32(static_cast<std::uint32_t>(t.dim()));
  w.put_u8(static_cast<std::uint8_t>(t.kind));
  for (double v : t.offset) w.put_f64(v);
  for (double v : t.matrix.data) w.put_f64(v);
  return w.take();
}

LinearTransform deserialize_transform(std::string_view bytes) {
  ByteReader r(bytes, "transform");
  r.expect_magic(kTransformMagic);
  const std::uint32_t d = r.get_u32();
  const std::uint8_t tag = r.get_u8();
  if (tag > static_cast<std::uint8_t>(TransformKind::kZcaWhiten)) {
    throw Error(ErrorCode::kCorruptFile, "transform: unknown kind tag " + std::to_string(tag));
  }
  r.need(static_cast<std::size_t>(d) * (d + 1) * 8);
  LinearTransform t;
  t.kind = static_cast<TransformKind>(tag);
  t.offset.resize(d);
  for (auto& v : t.offset) v = r.get_f64();
  t.matrix = Matrix(d, d);
  for (auto& v : t.matrix.data) v = r.get_f64();
  return t;
}

void save_transform(const LinearTransform& t, const std::string& path) {
  write_file_atomic(path, serialize_transform(t));
}

LinearTransform load_transform(const std::string& path) { return deserialize_transform(read_file(path)); }

}  // namespace idr
