#include <doctest.h>

#include <cmath>
#include <random>

#include "idreamrec/embedding_space.hpp"
#include "idreamrec/error.hpp"
#include "idreamrec/kernels.hpp"

using namespace idr;

namespace {

EmbeddingMatrix from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t n = rows.size(), d = rows.begin()->size();
  EmbeddingMatrix e{Matrix(n, d)};
  std::size_t i = 0;
  for (const auto& r : rows) {
    std::size_t j = 0;
    for (double v : r) e.vectors(i, j++) = v;
    ++i;
  }
  return e;
}

EmbeddingMatrix random_embeddings(std::size_t n, std::size_t d, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  EmbeddingMatrix e{Matrix(n, d)};
  // Correlated columns with unequal scales.
  for (std::size_t i = 0; i < n; ++i) {
    double carry = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      carry = 0.6 * carry + normal(rng) * (1.0 + 0.3 * static_cast<double>(j));
      e.vectors(i, j) = carry + 2.0;
    }
  }
  return e;
}

// Independent two-pass population moments.
void reference_moments(const EmbeddingMatrix& e, std::vector<double>& mean, Matrix& cov) {
  const std::size_t n = e.count(), d = e.dim();
  mean.assign(d, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) mean[j] += e.vectors(i, j) / static_cast<double>(n);
  cov = Matrix(d, d);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t a = 0; a < d; ++a)
      for (std::size_t b = 0; b < d; ++b)
        cov(a, b) += (e.vectors(i, a) - mean[a]) * (e.vectors(i, b) - mean[b]) / static_cast<double>(n);
}

}  // namespace

TEST_CASE("moments use the population divisor") {
  const Moments m = compute_moments(from_rows({{1, 0}, {-1, 0}}));
  CHECK(m.mean == std::vector<double>{0.0, 0.0});
  CHECK(m.covariance(0, 0) == 1.0);
  CHECK(m.covariance(0, 1) == 0.0);
  CHECK(m.covariance(1, 0) == 0.0);
  CHECK(m.covariance(1, 1) == 0.0);
}

TEST_CASE("identical rows have zero covariance") {
  const Moments m = compute_moments(from_rows({{3, -2, 5}, {3, -2, 5}}));
  for (double v : m.covariance.data) CHECK(v == 0.0);
}

TEST_CASE("moments need two rows") {
  try {
    compute_moments(from_rows({{1, 2}}));
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kDegenerateInput);
  }
}

TEST_CASE("standard normal sample covariance is near identity") {
  std::mt19937_64 rng(11);
  std::normal_distribution<double> normal;
  EmbeddingMatrix e{Matrix(100000, 4)};
  for (double& v : e.vectors.data) v = normal(rng);
  const Moments m = compute_moments(e);
  for (std::size_t a = 0; a < 4; ++a)
    for (std::size_t b = 0; b < 4; ++b) CHECK(std::abs(m.covariance(a, b) - (a == b ? 1.0 : 0.0)) < 0.05);
}

TEST_CASE("moments agree with a two-pass reference") {
  const EmbeddingMatrix e = random_embeddings(300, 6, 3);
  const Moments m = compute_moments(e);
  std::vector<double> mean;
  Matrix cov;
  reference_moments(e, mean, cov);
  for (std::size_t j = 0; j < 6; ++j) CHECK(m.mean[j] == doctest::Approx(mean[j]).epsilon(1e-12));
  CHECK(frobenius_distance(m.covariance, cov) < 1e-10);
}

TEST_CASE("diagonal covariance decomposes to itself") {
  Moments m{{0, 0}, Matrix(2, 2)};
  m.covariance(0, 0) = 4;
  m.covariance(1, 1) = 1;
  const SpectralDecomposition s = spectral_decompose(m);
  CHECK(s.eigenvalues == std::vector<double>{4.0, 1.0});
  CHECK(frobenius_distance(s.basis, Matrix::identity(2)) == 0.0);
}

TEST_CASE("two-by-two symmetric matrix decomposes by hand") {
  Moments m{{0, 0}, Matrix(2, 2)};
  m.covariance.data = {2, 1, 1, 2};
  const SpectralDecomposition s = spectral_decompose(m);
  CHECK(s.eigenvalues[0] == doctest::Approx(3.0).epsilon(1e-14));
  CHECK(s.eigenvalues[1] == doctest::Approx(1.0).epsilon(1e-14));
  const double r = 1.0 / std::sqrt(2.0);
  // Column 0 is (1,1)/sqrt2. Column 1 is +-(1,-1)/sqrt2; the sign rule picks the first
  // entry on a magnitude tie.
  CHECK(s.basis(0, 0) == doctest::Approx(r).epsilon(1e-12));
  CHECK(s.basis(1, 0) == doctest::Approx(r).epsilon(1e-12));
  CHECK(std::abs(s.basis(0, 1)) == doctest::Approx(r).epsilon(1e-12));
  CHECK(s.basis(0, 1) == doctest::Approx(-s.basis(1, 1)).epsilon(1e-12));
}

TEST_CASE("decomposition reconstructs the covariance") {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const Moments m = compute_moments(random_embeddings(200, 12, seed));
    const SpectralDecomposition s = spectral_decompose(m);
    Matrix lam(12, 12);
    for (std::size_t i = 0; i < 12; ++i) lam(i, i) = s.raw_eigenvalues[i];
    const Matrix rec = matmul(matmul(s.basis, lam), transpose(s.basis));
    CHECK(frobenius_distance(rec, m.covariance) < 1e-8);
    for (std::size_t i = 1; i < 12; ++i) CHECK(s.eigenvalues[i - 1] >= s.eigenvalues[i]);
    for (std::size_t c = 0; c < 12; ++c) {
      double best = 0.0;
      for (std::size_t r = 0; r < 12; ++r)
        if (std::abs(s.basis(r, c)) > std::abs(best)) best = s.basis(r, c);
      CHECK(best > 0.0);
    }
  }
}

TEST_CASE("asymmetric covariance is rejected") {
  Moments m{{0, 0}, Matrix(2, 2)};
  m.covariance.data = {1, 0.5, 0.0, 1};
  CHECK_THROWS_AS(spectral_decompose(m), Error);
}

TEST_CASE("eigenvalues below the floor are lifted") {
  const Moments m = compute_moments(from_rows({{1, 0}, {-1, 0}, {0, 0}}));
  const SpectralDecomposition s = spectral_decompose(m, 1e-3);
  CHECK(s.floored_count == 1);
  CHECK(s.eigenvalues[1] == 1e-3);
  CHECK(s.raw_eigenvalues[1] == 0.0);
}

TEST_CASE("scale transform multiplies") {
  const LinearTransform t = fit_transform(from_rows({{1, 2}, {3, 1}}), TransformKind::kScale, 2.0);
  const std::vector<double> e{1, 2};
  CHECK(apply_transform(t, e) == std::vector<double>{2.0, 4.0});
}

TEST_CASE("scale kinds need a positive factor") {
  const auto e = random_embeddings(20, 3, 1);
  CHECK_THROWS_AS(fit_transform(e, TransformKind::kScale), Error);
  CHECK_THROWS_AS(fit_transform(e, TransformKind::kScaleOrtho, -1.0), Error);
}

TEST_CASE("whitening kinds produce zero mean and identity covariance") {
  const EmbeddingMatrix e = random_embeddings(500, 16, 7);
  for (auto kind : {TransformKind::kPcaWhiten, TransformKind::kPcaWhitenO, TransformKind::kZcaWhiten}) {
    CAPTURE(to_string(kind));
    const EmbeddingMatrix z = apply_transform(fit_transform(e, kind), e);
    std::vector<double> mean;
    Matrix cov;
    reference_moments(z, mean, cov);
    CHECK(frobenius_distance(cov, Matrix::identity(16)) < 1e-6);
    for (double v : mean) CHECK(std::abs(v) < 1e-8);
  }
}

TEST_CASE("whitening matrices follow their closed forms") {
  const EmbeddingMatrix e = random_embeddings(200, 5, 9);
  const SpectralDecomposition s = spectral_decompose(compute_moments(e));
  Matrix inv_sqrt(5, 5);
  for (std::size_t i = 0; i < 5; ++i) inv_sqrt(i, i) = 1.0 / std::sqrt(s.eigenvalues[i]);
  const Matrix pca = matmul(s.basis, inv_sqrt);
  CHECK(frobenius_distance(fit_transform(e, TransformKind::kPcaWhiten).matrix, pca) < 1e-12);
  CHECK(frobenius_distance(fit_transform(e, TransformKind::kPcaWhitenO).matrix, matmul(pca, s.basis)) < 1e-12);
  CHECK(frobenius_distance(fit_transform(e, TransformKind::kZcaWhiten).matrix, matmul(pca, transpose(s.basis))) <
        1e-12);
  const LinearTransform so = fit_transform(e, TransformKind::kScaleOrtho, 0.5);
  for (double v : so.offset) CHECK(v == 0.0);
  Matrix half_o = s.basis;
  for (double& v : half_o.data) v *= 0.5;
  CHECK(frobenius_distance(so.matrix, half_o) < 1e-15);
}

TEST_CASE("scale-ortho preserves dot-product order") {
  const EmbeddingMatrix e = random_embeddings(120, 8, 21);
  const LinearTransform t = fit_transform(e, TransformKind::kScaleOrtho, 1.7);
  const EmbeddingMatrix z = apply_transform(t, e);
  auto dot = [](std::span<const double> a, std::span<const double> b) {
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
  };
  std::mt19937_64 rng(4);
  std::uniform_int_distribution<std::size_t> pick(0, 119);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t x = pick(rng), y = pick(rng), w = pick(rng);
    const double before = dot(e.item(x), e.item(y)) - dot(e.item(x), e.item(w));
    const double after = dot(z.item(x), z.item(y)) - dot(z.item(x), z.item(w));
    CHECK((before > 0) == (after > 0));
  }
}

TEST_CASE("rank-deficient whitening without a floor is singular") {
  const EmbeddingMatrix e = from_rows({{1, 1}, {2, 2}, {3, 3}});
  try {
    fit_transform(e, TransformKind::kZcaWhiten, std::nullopt, 0.0);
    FAIL("expected an error");
  } catch (const Error& err) {
    CHECK(err.code() == ErrorCode::kSingularTransform);
  }
  CHECK(fit_transform(e, TransformKind::kZcaWhiten).floored_eigenvalues == 1);
}

TEST_CASE("apply_transform identities") {
  LinearTransform id{TransformKind::kIdentity, {0, 0, 0}, Matrix::identity(3)};
  const std::vector<double> e{1.5, -2, 7};
  CHECK(apply_transform(id, e) == e);

  LinearTransform anyA{TransformKind::kZcaWhiten, e, Matrix(3, 3, 0.7)};
  for (double v : apply_transform(anyA, e)) CHECK(v == 0.0);

  LinearTransform swap{TransformKind::kScaleOrtho, {1, 1}, Matrix(2, 2)};
  swap.matrix.data = {0, 1, 1, 0};
  CHECK(apply_transform(swap, std::vector<double>{3, 2}) == std::vector<double>{1.0, 2.0});
  CHECK_THROWS_AS(apply_transform(swap, std::vector<double>{1, 2, 3}), Error);
}

TEST_CASE("batch transform equals rowwise transform") {
  const EmbeddingMatrix e = random_embeddings(64, 7, 2);
  const LinearTransform t = fit_transform(e, TransformKind::kPcaWhitenO);
  const EmbeddingMatrix z = apply_transform(t, e);
  for (std::size_t i = 0; i < e.count(); ++i) {
    const auto row = apply_transform(t, e.item(i));
    for (std::size_t j = 0; j < 7; ++j) CHECK(z.vectors(i, j) == row[j]);
  }
}

TEST_CASE("transform serialization round-trips bit-exactly") {
  const EmbeddingMatrix e = random_embeddings(50, 4, 5);
  for (auto kind : {TransformKind::kIdentity, TransformKind::kPcaWhiten, TransformKind::kZcaWhiten}) {
    const LinearTransform t = fit_transform(e, kind);
    const std::string bytes = serialize_transform(t);
    const LinearTransform back = deserialize_transform(bytes);
    CHECK(back.kind == t.kind);
    CHECK(back.offset == t.offset);
    CHECK(back.matrix == t.matrix);
    CHECK(serialize_transform(back) == bytes);
    CHECK_THROWS_AS(deserialize_transform(bytes.substr(0, bytes.size() - 3)), Error);
  }
  CHECK_THROWS_AS(deserialize_transform("XXXX"), Error);
}

TEST_CASE("transform kind names round-trip") {
  for (auto kind : {TransformKind::kIdentity, TransformKind::kScale, TransformKind::kScaleOrtho,
                    TransformKind::kPcaWhiten, TransformKind::kPcaWhitenO, TransformKind::kZcaWhiten}) {
    CHECK(parse_transform_kind(to_string(kind)) == kind);
  }
  CHECK_THROWS_AS(parse_transform_kind("whiten"), Error);
}

TEST_CASE("parallel and serial kernels agree bit-exactly") {
  const EmbeddingMatrix e = random_embeddings(257, 9, 13);
  std::vector<double> q(9, 0.25);
  std::vector<double> a(257), b(257);
  kernels::serial::score_rows(e.vectors, q, a);
  kernels::omp::score_rows(e.vectors, q, b);
  CHECK(a == b);

  const LinearTransform t = fit_transform(e, TransformKind::kZcaWhiten);
  Matrix s1(257, 9), s2(257, 9);
  kernels::serial::affine_rows(e.vectors, t.offset, t.matrix, s1);
  kernels::omp::affine_rows(e.vectors, t.offset, t.matrix, s2);
  CHECK(s1 == s2);
}
