#include "idreamrec/kernels.hpp"

#include <cassert>

namespace idr::kernels::serial {

void score_rows(const Matrix& rows, std::span<const double> query, std::span<double> out) {
  assert(query.size() == rows.cols && out.size() == rows.rows);
  for (std::size_t i = 0; i < rows.rows; ++i) {
    const double* r = rows.data.data() + i * rows.cols;
    double acc = 0.0;
    for (std::size_t j = 0; j < rows.cols; ++j) acc += r[j] * query[j];
    out[i] = acc;
  }
}

void affine_rows(const Matrix& in, std::span<const double> offset, const Matrix& a, Matrix& out) {
  assert(offset.size() == in.cols && a.rows == in.cols && out.rows == in.rows && out.cols == a.cols);
  std::vector<double> centered(in.cols);
  for (std::size_t i = 0; i < in.rows; ++i) {
    for (std::size_t k = 0; k < in.cols; ++k) centered[k] = in(i, k) - offset[k];
    for (std::size_t j = 0; j < a.cols; ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < in.cols; ++k) acc += centered[k] * a(k, j);
      out(i, j) = acc;
    }
  }
}

void sum_buffers(const std::vector<std::vector<double>>& buffers, std::span<double> out) {
  for (std::size_t j = 0; j < out.size(); ++j) {
    double acc = 0.0;
    for (const auto& b : buffers) acc += b[j];
    out[j] = acc;
  }
}

}  // namespace idr::kernels::serial
