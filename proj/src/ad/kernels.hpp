#pragma once

#include <cstdint>

namespace afl::ad::kernels {

// C (m x n) = op(A) (m x k) * op(B) (k x n), row-major; accumulates into C when asked.
void gemm(const double* a, bool transpose_a, const double* b, bool transpose_b, double* c, int64_t m, int64_t k,
          int64_t n, bool accumulate);

struct ConvGeometry {
  int64_t channels, height, width, kernel, stride, padding, out_height, out_width;
};

// image [C, H, W] -> columns [C*k*k, Ho*Wo]
void im2col(const double* image, const ConvGeometry& g, double* cols);
// accumulates columns back into image [C, H, W]
void col2im(const double* cols, const ConvGeometry& g, double* image);

}  // namespace afl::ad::kernels
