#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "idreamrec/binary_io.hpp"
#include "idreamrec/error.hpp"
#include "idreamrec/matrix.hpp"

namespace idr {

const char* to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kDegenerateInput: return "degenerate input";
    case ErrorCode::kInvalidInput: return "invalid input";
    case ErrorCode::kSingularTransform: return "singular transform";
    case ErrorCode::kDimensionMismatch: return "dimension mismatch";
    case ErrorCode::kInvalidSchedule: return "invalid schedule";
    case ErrorCode::kInvalidVariance: return "invalid variance";
    case ErrorCode::kOutOfRange: return "out of range";
    case ErrorCode::kDivergedTraining: return "diverged training";
    case ErrorCode::kCorruptFile: return "corrupt file";
    case ErrorCode::kIo: return "io error";
    case ErrorCode::kTransport: return "transport error";
    case ErrorCode::kInconsistentModel: return "inconsistent model";
    case ErrorCode::kTooFewPairs: return "too few pairs";
  }
  return "unknown error";
}

Matrix transpose(const Matrix& m) {
  Matrix t(m.cols, m.rows);
  for (std::size_t i = 0; i < m.rows; ++i)
    for (std::size_t j = 0; j < m.cols; ++j) t(j, i) = m(i, j);
  return t;
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols != b.rows) throw Error(ErrorCode::kDimensionMismatch, "matmul inner dimensions differ");
  Matrix c(a.rows, b.cols);
  for (std::size_t i = 0; i < a.rows; ++i)
    for (std::size_t k = 0; k < a.cols; ++k) {
      const double aik = a(i, k);
      for (std::size_t j = 0; j < b.cols; ++j) c(i, j) += aik * b(k, j);
    }
  return c;
}

double frobenius_distance(const Matrix& a, const Matrix& b) {
  if (a.rows != b.rows || a.cols != b.cols) {
    throw Error(ErrorCode::kDimensionMismatch, "frobenius_distance shape mismatch");
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    const double diff = a.data[i] - b.data[i];
    acc += diff * diff;
  }
  return std::sqrt(acc);
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, "cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file_atomic(const std::string& path, std::string_view bytes) {
  namespace fs = std::filesystem;
  const fs::path target(path);
  if (target.has_parent_path()) fs::create_directories(target.parent_path());
  std::random_device rd;
  const fs::path tmp = target.string() + ".tmp" + std::to_string(rd());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::kIo, "cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error(ErrorCode::kIo, "short write to " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, target, ec);
  if (ec) {
    fs::remove(tmp);
    throw Error(ErrorCode::kIo, "rename to " + path + " failed: " + ec.message());
  }
}

}  // namespace idr
