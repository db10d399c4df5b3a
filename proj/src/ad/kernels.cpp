#include "kernels.hpp"

#include <Eigen/Core>

namespace afl::ad::kernels {

namespace {
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;
}  // namespace

void gemm(const double* a, bool transpose_a, const double* b, bool transpose_b, double* c, int64_t m, int64_t k,
          int64_t n, bool accumulate) {
  MutMap cm(c, m, n);
  ConstMap am(a, transpose_a ? k : m, transpose_a ? m : k);
  ConstMap bm(b, transpose_b ? n : k, transpose_b ? k : n);
  if (!accumulate) cm.setZero();
  if (!transpose_a && !transpose_b) {
    cm.noalias() += am * bm;
  } else if (transpose_a && !transpose_b) {
    cm.noalias() += am.transpose() * bm;
  } else if (!transpose_a && transpose_b) {
    cm.noalias() += am * bm.transpose();
  } else {
    cm.noalias() += am.transpose() * bm.transpose();
  }
}

void im2col(const double* image, const ConvGeometry& g, double* cols) {
  const int64_t plane = g.out_height * g.out_width;
  for (int64_t c = 0; c < g.channels; ++c) {
    for (int64_t ky = 0; ky < g.kernel; ++ky) {
      for (int64_t kx = 0; kx < g.kernel; ++kx) {
        double* row = cols + ((c * g.kernel + ky) * g.kernel + kx) * plane;
        for (int64_t oy = 0; oy < g.out_height; ++oy) {
          const int64_t iy = oy * g.stride - g.padding + ky;
          for (int64_t ox = 0; ox < g.out_width; ++ox) {
            const int64_t ix = ox * g.stride - g.padding + kx;
            const bool inside = iy >= 0 && iy < g.height && ix >= 0 && ix < g.width;
            row[oy * g.out_width + ox] = inside ? image[(c * g.height + iy) * g.width + ix] : 0.0;
          }
        }
      }
    }
  }
}

void col2im(const double* cols, const ConvGeometry& g, double* image) {
  const int64_t plane = g.out_height * g.out_width;
  for (int64_t c = 0; c < g.channels; ++c) {
    for (int64_t ky = 0; ky < g.kernel; ++ky) {
      for (int64_t kx = 0; kx < g.kernel; ++kx) {
        const double* row = cols + ((c * g.kernel + ky) * g.kernel + kx) * plane;
        for (int64_t oy = 0; oy < g.out_height; ++oy) {
          const int64_t iy = oy * g.stride - g.padding + ky;
          if (iy < 0 || iy >= g.height) continue;
          for (int64_t ox = 0; ox < g.out_width; ++ox) {
            const int64_t ix = ox * g.stride - g.padding + kx;
            if (ix < 0 || ix >= g.width) continue;
            image[(c * g.height + iy) * g.width + ix] += row[oy * g.out_width + ox];
          }
        }
      }
    }
  }
}

}  // namespace afl::ad::kernels
