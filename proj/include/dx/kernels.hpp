#pragma once

// Similarity and assignment kernels. Each kernel has a serial reference and an
// OpenMP variant; both compute every dot product with the same fixed lane order,
// so the parallel result does not depend on the thread count.

#include <cstddef>
#include <span>
#include <vector>

namespace dx {

struct SimilarityMatrix {
  std::size_t rows = 0;  // patches
  std::size_t cols = 0;  // prototypes
  std::vector<float> values;

  float at(std::size_t n, std::size_t t) const { return values[n * cols + t]; }
  std::span<const float> row(std::size_t n) const {
    return std::span<const float>(values).subspan(n * cols, cols);
  }
};

// Dense row-major matrix operand for the kernels.
struct MatrixRef {
  std::span<const float> data;
  std::size_t rows = 0;
  std::size_t dim = 0;
  const float* row(std::size_t i) const { return data.data() + i * dim; }
};

namespace kernels {

inline constexpr std::size_t kLanes = 8;
inline constexpr std::size_t kRowBlock = 256;

// Dot product accumulated in kLanes float partial sums combined pairwise.
float dot_fixed(const float* a, const float* b, std::size_t n);

// Squared norms in the same summation order; index of the first zero-norm row
// is reported through `zero_row` (rows when none).
std::vector<double> row_norms(MatrixRef m, std::size_t& zero_row);
std::vector<double> row_norms_parallel(MatrixRef m, std::size_t& zero_row);

// S[n,t] = <e_n, p_t> / (|e_n| |p_t|). Norms must be nonzero (checked by callers).
SimilarityMatrix cosine_serial(MatrixRef patches, MatrixRef prototypes,
                               std::span<const double> patch_norms,
                               std::span<const double> proto_norms);
SimilarityMatrix cosine_parallel(MatrixRef patches, MatrixRef prototypes,
                                 std::span<const double> patch_norms,
                                 std::span<const double> proto_norms);

// Row argmax, ties to the lowest column.
std::vector<std::size_t> argmax_rows_serial(const SimilarityMatrix& s);
std::vector<std::size_t> argmax_rows_parallel(const SimilarityMatrix& s);

int max_threads();
void set_threads(int n);

}  // namespace kernels
}  // namespace dx
