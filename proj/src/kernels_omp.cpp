#include "idreamrec/kernels.hpp"

#include <cassert>
#include <cstdint>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace idr::kernels {

int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

namespace omp {

void score_rows(const Matrix& rows, std::span<const double> query, std::span<double> out) {
  assert(query.size() == rows.cols && out.size() == rows.rows);
  const auto n = static_cast<std::int64_t>(rows.rows);
  const std::size_t d = rows.cols;
  const double* base = rows.data.data();
  const double* q = query.data();
  double* o = out.data();
#pragma omp parallel for schedule(static) if (n > 256)
  for (std::int64_t i = 0; i < n; ++i) {
    const double* r = base + static_cast<std::size_t>(i) * d;
    double acc = 0.0;
    for (std::size_t j = 0; j < d; ++j) acc += r[j] * q[j];
    o[i] = acc;
  }
}

void affine_rows(const Matrix& in, std::span<const double> offset, const Matrix& a, Matrix& out) {
  assert(offset.size() == in.cols && a.rows == in.cols && out.rows == in.rows && out.cols == a.cols);
  const auto n = static_cast<std::int64_t>(in.rows);
#pragma omp parallel if (n > 64)
  {
    std::vector<double> centered(in.cols);
#pragma omp for schedule(static)
    for (std::int64_t i = 0; i < n; ++i) {
      const auto r = static_cast<std::size_t>(i);
      for (std::size_t k = 0; k < in.cols; ++k) centered[k] = in(r, k) - offset[k];
      for (std::size_t j = 0; j < a.cols; ++j) {
        double acc = 0.0;
        for (std::size_t k = 0; k < in.cols; ++k) acc += centered[k] * a(k, j);
        out(r, j) = acc;
      }
    }
  }
}

void sum_buffers(const std::vector<std::vector<double>>& buffers, std::span<double> out) {
  const auto n = static_cast<std::int64_t>(out.size());
  double* o = out.data();
#pragma omp parallel for schedule(static) if (n > 4096)
  for (std::int64_t j = 0; j < n; ++j) {
    double acc = 0.0;
    for (const auto& b : buffers) acc += b[static_cast<std::size_t>(j)];
    o[j] = acc;
  }
}

}  // namespace omp
}  // namespace idr::kernels
