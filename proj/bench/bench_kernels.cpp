// Serial reference vs OpenMP kernels on catalog-sized inputs.
#include <random>

#include <benchmark/benchmark.h>

#include "idreamrec/kernels.hpp"

namespace {

idr::Matrix random_matrix(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  idr::Matrix m(rows, cols);
  for (double& v : m.data) v = normal(rng);
  return m;
}

template <auto Kernel>
void BM_score_rows(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const idr::Matrix rows = random_matrix(n, 64, 1);
  const idr::Matrix q = random_matrix(1, 64, 2);
  std::vector<double> out(n);
  for (auto _ : state) {
    Kernel(rows, q.row(0), out);
    benchmark::DoNotOptimize(out.data());
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations()) * state.range(0));
}

template <auto Kernel>
void BM_affine_rows(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const idr::Matrix in = random_matrix(n, 64, 3);
  const idr::Matrix a = random_matrix(64, 64, 4);
  const std::vector<double> offset(64, 0.5);
  idr::Matrix out(n, 64);
  for (auto _ : state) {
    Kernel(in, offset, a, out);
    benchmark::DoNotOptimize(out.data.data());
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations()) * state.range(0));
}

BENCHMARK(BM_score_rows<idr::kernels::serial::score_rows>)->Name("score_rows/serial")->Range(1 << 10, 1 << 16);
BENCHMARK(BM_score_rows<idr::kernels::omp::score_rows>)->Name("score_rows/omp")->Range(1 << 10, 1 << 16);
BENCHMARK(BM_affine_rows<idr::kernels::serial::affine_rows>)->Name("affine_rows/serial")->Range(1 << 8, 1 << 14);
BENCHMARK(BM_affine_rows<idr::kernels::omp::affine_rows>)->Name("affine_rows/omp")->Range(1 << 8, 1 << 14);

}  // namespace

BENCHMARK_MAIN();
