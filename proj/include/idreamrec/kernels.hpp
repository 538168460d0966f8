#pragma once

// Data-parallel inner loops. Every kernel exists twice: a plain serial reference
// (kept for tests and benchmarks) and an OpenMP version used by the library.
// Both produce bit-identical results: parallelism is only ever over independent
// output elements, and every reduction runs in a fixed sequential order.

#include <span>
#include <vector>

#include "idreamrec/matrix.hpp"

namespace idr::kernels {

namespace serial {

/// out[i] = <rows.row(i), query>
void score_rows(const Matrix& rows, std::span<const double> query, std::span<double> out);

/// out.row(i) = (in.row(i) - offset) * a
void affine_rows(const Matrix& in, std::span<const double> offset, const Matrix& a, Matrix& out);

/// out[j] = sum_b buffers[b][j], summed in buffer order.
void sum_buffers(const std::vector<std::vector<double>>& buffers, std::span<double> out);

}  // namespace serial

namespace omp {

void score_rows(const Matrix& rows, std::span<const double> query, std::span<double> out);
void affine_rows(const Matrix& in, std::span<const double> offset, const Matrix& a, Matrix& out);
void sum_buffers(const std::vector<std::vector<double>>& buffers, std::span<double> out);

}  // namespace omp

int max_threads();

}  // namespace idr::kernels
