#include "dx/kernels.hpp"

#include <algorithm>
#include <cmath>

#include <omp.h>

namespace dx::kernels {

namespace {

float clamp_unit(double v) { return static_cast<float>(std::clamp(v, -1.0, 1.0)); }

}  // namespace

float dot_fixed(const float* a, const float* b, std::size_t n) {
  float acc[kLanes] = {};
  std::size_t k = 0;
  for (; k + kLanes <= n; k += kLanes) {
    for (std::size_t j = 0; j < kLanes; ++j) acc[j] += a[k + j] * b[k + j];
  }
  for (std::size_t j = 0; k < n; ++k, ++j) acc[j] += a[k] * b[k];
  return ((acc[0] + acc[4]) + (acc[2] + acc[6])) + ((acc[1] + acc[5]) + (acc[3] + acc[7]));
}

std::vector<double> row_norms(MatrixRef m, std::size_t& zero_row) {
  std::vector<double> out(m.rows);
  zero_row = m.rows;
  for (std::size_t i = 0; i < m.rows; ++i) {
    out[i] = std::sqrt(static_cast<double>(dot_fixed(m.row(i), m.row(i), m.dim)));
    if (out[i] == 0.0 && zero_row == m.rows) zero_row = i;
  }
  return out;
}

std::vector<double> row_norms_parallel(MatrixRef m, std::size_t& zero_row) {
  std::vector<double> out(m.rows);
  const auto rows = static_cast<std::ptrdiff_t>(m.rows);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < rows; ++i) {
    const auto r = static_cast<std::size_t>(i);
    out[r] = std::sqrt(static_cast<double>(dot_fixed(m.row(r), m.row(r), m.dim)));
  }
  zero_row = m.rows;
  for (std::size_t i = 0; i < m.rows; ++i) {
    if (out[i] == 0.0) {
      zero_row = i;
      break;
    }
  }
  return out;
}

SimilarityMatrix cosine_serial(MatrixRef patches, MatrixRef prototypes,
                               std::span<const double> patch_norms,
                               std::span<const double> proto_norms) {
  SimilarityMatrix s{patches.rows, prototypes.rows, std::vector<float>(patches.rows * prototypes.rows)};
  for (std::size_t n = 0; n < patches.rows; ++n) {
    for (std::size_t t = 0; t < prototypes.rows; ++t) {
      const float d = dot_fixed(patches.row(n), prototypes.row(t), patches.dim);
      s.values[n * s.cols + t] = clamp_unit(static_cast<double>(d) / (patch_norms[n] * proto_norms[t]));
    }
  }
  return s;
}

SimilarityMatrix cosine_parallel(MatrixRef patches, MatrixRef prototypes,
                                 std::span<const double> patch_norms,
                                 std::span<const double> proto_norms) {
  SimilarityMatrix s{patches.rows, prototypes.rows, std::vector<float>(patches.rows * prototypes.rows)};
  const std::size_t cols = s.cols;
  const auto blocks = static_cast<std::ptrdiff_t>((patches.rows + kRowBlock - 1) / kRowBlock);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t b = 0; b < blocks; ++b) {
    const std::size_t begin = static_cast<std::size_t>(b) * kRowBlock;
    const std::size_t end = std::min(begin + kRowBlock, patches.rows);
    for (std::size_t n = begin; n < end; ++n) {
      const float* e = patches.row(n);
      float* out = s.values.data() + n * cols;
      for (std::size_t t = 0; t < cols; ++t) {
        const float d = dot_fixed(e, prototypes.row(t), patches.dim);
        out[t] = clamp_unit(static_cast<double>(d) / (patch_norms[n] * proto_norms[t]));
      }
    }
  }
  return s;
}

std::vector<std::size_t> argmax_rows_serial(const SimilarityMatrix& s) {
  std::vector<std::size_t> out(s.rows, 0);
  for (std::size_t n = 0; n < s.rows; ++n) {
    float best = s.at(n, 0);
    for (std::size_t t = 1; t < s.cols; ++t) {
      if (s.at(n, t) > best) {
        best = s.at(n, t);
        out[n] = t;
      }
    }
  }
  return out;
}

std::vector<std::size_t> argmax_rows_parallel(const SimilarityMatrix& s) {
  std::vector<std::size_t> out(s.rows, 0);
  const auto rows = static_cast<std::ptrdiff_t>(s.rows);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < rows; ++i) {
    const auto n = static_cast<std::size_t>(i);
    const float* r = s.values.data() + n * s.cols;
    std::size_t arg = 0;
    for (std::size_t t = 1; t < s.cols; ++t) {
      if (r[t] > r[arg]) arg = t;
    }
    out[n] = arg;
  }
  return out;
}

int max_threads() { return omp_get_max_threads(); }
void set_threads(int n) { omp_set_num_threads(std::max(1, n)); }

}  // namespace dx::kernels
