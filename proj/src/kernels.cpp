// SPDX-License-Identifier: Apache-2.0
//
// Forward and gradient kernels over dense NCHW tensors.
//
// Convolutions go through im2col/im2row panels and a blocked GEMM whose
// per-element reduction runs in a fixed k order with double accumulators.
// That gives results that are bit-exact for any worker count and accurate
// enough to compare against double-precision oracles at tight tolerances.

#include "polypseg/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>

namespace polypseg {

namespace {

using std::int64_t;

void require(bool cond, const std::string& msg) {
  if (!cond) throw ShapeError(msg);
}

// Output extent of a strided correlation; enforces exact division.
int conv_out_extent(int in, int k, int stride, int pad, const std::string& what) {
  int span = in + 2 * pad - k;
  if (span < 0 || span % stride != 0) {
    throw ShapeError("conv2d: non-integral output size along " + what + ": (" +
                     std::to_string(in) + " + 2*" + std::to_string(pad) + " - " +
                     std::to_string(k) + ") not a non-negative multiple of stride " +
                     std::to_string(stride));
  }
  return span / stride + 1;
}

}  // namespace

template <typename T>
BatchNormParamsT<T> BatchNormParamsT<T>::identity(int channels, T eps, T momentum) {
  BatchNormParamsT<T> p;
  p.gamma = TensorT<T>::full({1, channels, 1, 1}, T(1));
  p.beta = TensorT<T>::zeros({1, channels, 1, 1});
  p.running_mean = TensorT<T>::zeros({1, channels, 1, 1});
  p.running_var = TensorT<T>::full({1, channels, 1, 1}, T(1));
  p.epsilon = eps;
  p.momentum = momentum;
  return p;
}

// ---------------------------------------------------------------------------
// GEMM core
// ---------------------------------------------------------------------------

namespace detail {

namespace {

typedef double vd __attribute__((vector_size(64)));  // 8 doubles

inline vd splat(double x) { return vd{x, x, x, x, x, x, x, x}; }

constexpr int64_t kMr = 8;   // rows per register tile
constexpr int64_t kNr = 16;  // accumulator columns per tile (2 vd)

// One n-tile task: packs B columns [k x nb] to double once, then walks all
// row tiles with the accumulators held in registers. Each C element is
// produced by exactly one task, k ascending, so results do not depend on the
// worker count.
template <typename T, bool kAccumulate>
void gemm_ntile(const T* a, const T* b, T* c, double* c_acc, int64_t m,
                int64_t n, int64_t k, int64_t ldc, int64_t n0, int64_t nb,
                double* pack) {
  for (int64_t kk = 0; kk < k; ++kk) {
    const T* brow = b + kk * n + n0;
    double* p = pack + kk * kNr;
    int64_t j = 0;
    for (; j < nb; ++j) p[j] = static_cast<double>(brow[j]);
    for (; j < kNr; ++j) p[j] = 0.0;
  }

  for (int64_t m0 = 0; m0 < m; m0 += kMr) {
    const int64_t mb = std::min(kMr, m - m0);
    if (mb == kMr) {
      vd c00{}, c01{}, c10{}, c11{}, c20{}, c21{}, c30{}, c31{};
      vd c40{}, c41{}, c50{}, c51{}, c60{}, c61{}, c70{}, c71{};
      const T* a0 = a + (m0 + 0) * k;
      const T* a1 = a + (m0 + 1) * k;
      const T* a2 = a + (m0 + 2) * k;
      const T* a3 = a + (m0 + 3) * k;
      const T* a4 = a + (m0 + 4) * k;
      const T* a5 = a + (m0 + 5) * k;
      const T* a6 = a + (m0 + 6) * k;
      const T* a7 = a + (m0 + 7) * k;
      for (int64_t kk = 0; kk < k; ++kk) {
        vd b0, b1, av;
        std::memcpy(&b0, pack + kk * kNr, sizeof(vd));
        std::memcpy(&b1, pack + kk * kNr + 8, sizeof(vd));
        av = splat(static_cast<double>(a0[kk])); c00 += av * b0; c01 += av * b1;
        av = splat(static_cast<double>(a1[kk])); c10 += av * b0; c11 += av * b1;
        av = splat(static_cast<double>(a2[kk])); c20 += av * b0; c21 += av * b1;
        av = splat(static_cast<double>(a3[kk])); c30 += av * b0; c31 += av * b1;
        av = splat(static_cast<double>(a4[kk])); c40 += av * b0; c41 += av * b1;
        av = splat(static_cast<double>(a5[kk])); c50 += av * b0; c51 += av * b1;
        av = splat(static_cast<double>(a6[kk])); c60 += av * b0; c61 += av * b1;
        av = splat(static_cast<double>(a7[kk])); c70 += av * b0; c71 += av * b1;
      }
      const vd rows[kMr][2] = {{c00, c01}, {c10, c11}, {c20, c21}, {c30, c31},
                               {c40, c41}, {c50, c51}, {c60, c61}, {c70, c71}};
      for (int64_t i = 0; i < kMr; ++i) {
        if constexpr (kAccumulate) {
          double* crow = c_acc + (m0 + i) * ldc + n0;
          for (int64_t j = 0; j < nb; ++j) {
            crow[j] += rows[i][j / 8][j % 8];
          }
        } else {
          T* crow = c + (m0 + i) * ldc + n0;
          for (int64_t j = 0; j < nb; ++j) {
            crow[j] = static_cast<T>(rows[i][j / 8][j % 8]);
          }
        }
      }
    } else {
      double acc[kMr][kNr] = {};
      for (int64_t kk = 0; kk < k; ++kk) {
        const double* p = pack + kk * kNr;
        for (int64_t i = 0; i < mb; ++i) {
          const double av = static_cast<double>(a[(m0 + i) * k + kk]);
          for (int64_t j = 0; j < kNr; ++j) acc[i][j] += av * p[j];
        }
      }
      for (int64_t i = 0; i < mb; ++i) {
        if constexpr (kAccumulate) {
          double* crow = c_acc + (m0 + i) * ldc + n0;
          for (int64_t j = 0; j < nb; ++j) crow[j] += acc[i][j];
        } else {
          T* crow = c + (m0 + i) * ldc + n0;
          for (int64_t j = 0; j < nb; ++j) crow[j] = static_cast<T>(acc[i][j]);
        }
      }
    }
  }
}

template <typename T, bool kAccumulate>
void gemm_impl(const T* a, const T* b, T* c, double* c_acc, int64_t m,
               int64_t n, int64_t k, int64_t ldc) {
  const int64_t ntiles = (n + kNr - 1) / kNr;
#pragma omp parallel for schedule(static)
  for (int64_t nt = 0; nt < ntiles; ++nt) {
    const int64_t n0 = nt * kNr;
    const int64_t nb = std::min(kNr, n - n0);
    static thread_local std::vector<double> pack;
    if (static_cast<int64_t>(pack.size()) < k * kNr) pack.resize(k * kNr);
    gemm_ntile<T, kAccumulate>(a, b, c, c_acc, m, n, k, ldc, n0, nb, pack.data());
  }
}

}  // namespace

template <typename T>
void gemm_nn(const T* a, const T* b, T* c, int64_t m, int64_t n, int64_t k) {
  gemm_impl<T, false>(a, b, c, nullptr, m, n, k, n);
}

template <typename T>
void gemm_nn_ldc(const T* a, const T* b, T* c, int64_t m, int64_t n, int64_t k,
                 int64_t ldc) {
  gemm_impl<T, false>(a, b, c, nullptr, m, n, k, ldc);
}

template <typename T>
void gemm_nn_acc(const T* a, const T* b, double* c_acc, int64_t m, int64_t n,
                 int64_t k) {
  gemm_impl<T, true>(a, b, nullptr, c_acc, m, n, k, n);
}

template void gemm_nn<float>(const float*, const float*, float*, int64_t, int64_t, int64_t);
template void gemm_nn<double>(const double*, const double*, double*, int64_t, int64_t, int64_t);
template void gemm_nn_acc<float>(const float*, const float*, double*, int64_t, int64_t, int64_t);
template void gemm_nn_acc<double>(const double*, const double*, double*, int64_t, int64_t, int64_t);

}  // namespace detail

// ---------------------------------------------------------------------------
// Panels
// ---------------------------------------------------------------------------

namespace {

// im2col panel for output rows [oy0, oy1): rows = c*kh*kw, cols = strip*ow.
template <typename T>
void im2col_strip(const TensorT<T>& x, int n, int kh, int kw, int stride,
                  int pad, int oh_total, int ow, int oy0, int oy1, T* panel) {
  (void)oh_total;
  const int c = x.dims.c, h = x.dims.h, w = x.dims.w;
  const int64_t cols = static_cast<int64_t>(oy1 - oy0) * ow;
  for (int ci = 0; ci < c; ++ci) {
    const T* src_plane = x.plane(n, ci);
    for (int ky = 0; ky < kh; ++ky) {
      for (int kx = 0; kx < kw; ++kx) {
        T* dst_row = panel + (static_cast<int64_t>(ci * kh + ky) * kw + kx) * cols;
        for (int oy = oy0; oy < oy1; ++oy) {
          T* dst = dst_row + static_cast<int64_t>(oy - oy0) * ow;
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) {
            std::fill(dst, dst + ow, T(0));
            continue;
          }
          const T* src = src_plane + static_cast<int64_t>(iy) * w;
          if (stride == 1) {
            const int lo = std::max(0, pad - kx);
            const int hi = std::min(ow, w + pad - kx);
            std::fill(dst, dst + std::min(lo, ow), T(0));
            if (hi > lo) std::memcpy(dst + lo, src + lo - pad + kx, (hi - lo) * sizeof(T));
            if (hi < ow) std::fill(dst + std::max(hi, 0), dst + ow, T(0));
          } else {
            for (int ox = 0; ox < ow; ++ox) {
              const int ix = ox * stride - pad + kx;
              dst[ox] = (ix >= 0 && ix < w) ? src[ix] : T(0);
            }
          }
        }
      }
    }
  }
}

// im2row panel for whole grid rows [oy0, oy1) of the strided grid (oh x ow):
// one panel row per grid position, the receptive patch flattened in
// (c, ky, kx) order. Bounds are resolved per grid row; interior patches
// copy without any per-element checks.
template <typename T>
void im2row_strip(const TensorT<T>& x, int n, int kh, int kw, int stride,
                  int pad, int ow, int oy0, int oy1, T* panel) {
  const int c = x.dims.c, h = x.dims.h, w = x.dims.w;
  const int64_t width = static_cast<int64_t>(c) * kh * kw;
  std::vector<char> ky_ok(kh);
  T* dst = panel;
  for (int oy = oy0; oy < oy1; ++oy) {
    for (int ky = 0; ky < kh; ++ky) {
      const int iy = oy * stride - pad + ky;
      ky_ok[ky] = iy >= 0 && iy < h;
    }
    for (int ox = 0; ox < ow; ++ox) {
      const int ix0 = ox * stride - pad;
      const bool interior = ix0 >= 0 && ix0 + kw <= w;
      for (int ci = 0; ci < c; ++ci) {
        const T* src_plane = x.plane(n, ci);
        for (int ky = 0; ky < kh; ++ky) {
          if (!ky_ok[ky]) {
            for (int kx = 0; kx < kw; ++kx) dst[kx] = T(0);
          } else {
            const T* src =
                src_plane + static_cast<int64_t>(oy * stride - pad + ky) * w + ix0;
            if (interior) {
              for (int kx = 0; kx < kw; ++kx) dst[kx] = src[kx];
            } else {
              for (int kx = 0; kx < kw; ++kx) {
                const int ix = ix0 + kx;
                dst[kx] = (ix >= 0 && ix < w) ? src[kx] : T(0);
              }
            }
          }
          dst += kw;
        }
      }
    }
  }
  (void)width;
}

// Scatter-add of GEMM columns back into an image plane set. cols has
// rows = co*kh*kw over whole grid rows [iy0, iy1) of the (grid_h x grid_w)
// input grid. Parallel over co: distinct channels write distinct planes.
// The valid ix window is hoisted out of the inner loop, which is a plain
// (strided) add.
template <typename T>
void col2im_add(const T* cols, int co, int kh, int kw, int stride, int pad,
                int grid_w, int iy0, int iy1, T* out, int oh, int ow) {
  const int64_t ncols = static_cast<int64_t>(iy1 - iy0) * grid_w;
#pragma omp parallel for schedule(static)
  for (int c = 0; c < co; ++c) {
    T* plane = out + static_cast<int64_t>(c) * oh * ow;
    for (int ky = 0; ky < kh; ++ky) {
      for (int kx = 0; kx < kw; ++kx) {
        const T* row = cols + (static_cast<int64_t>(c * kh + ky) * kw + kx) * ncols;
        // ox = ix*stride - pad + kx must land in [0, ow)
        int xlo = pad - kx;
        xlo = xlo <= 0 ? 0 : (xlo + stride - 1) / stride;
        const int xhi_num = ow - 1 + pad - kx;
        const int xhi = xhi_num < 0 ? -1 : std::min(grid_w - 1, xhi_num / stride);
        if (xhi < xlo) continue;
        for (int iy = iy0; iy < iy1; ++iy) {
          const int oy = iy * stride - pad + ky;
          if (oy < 0 || oy >= oh) continue;
          const T* src = row + static_cast<int64_t>(iy - iy0) * grid_w;
          T* dst = plane + static_cast<int64_t>(oy) * ow - pad + kx;
          if (stride == 1) {
            for (int ix = xlo; ix <= xhi; ++ix) dst[ix] += src[ix];
          } else {
            for (int ix = xlo; ix <= xhi; ++ix) dst[ix * stride] += src[ix];
          }
        }
      }
    }
  }
}

template <typename T>
void add_bias_planes(TensorT<T>& out, const TensorT<T>& bias) {
  const int64_t hw = static_cast<int64_t>(out.dims.h) * out.dims.w;
#pragma omp parallel for schedule(static) collapse(2)
  for (int n = 0; n < out.dims.n; ++n) {
    for (int c = 0; c < out.dims.c; ++c) {
      T* p = out.plane(n, c);
      const T b = bias.data[c];
      for (int64_t i = 0; i < hw; ++i) p[i] += b;
    }
  }
}

constexpr int64_t kPanelBudget = int64_t(4) << 20;  // elements per panel

}  // namespace

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> conv2d(const TensorT<T>& x, const TensorT<T>& weight,
                  std::type_identity_t<const TensorT<T>*> bias, int stride,
                  int pad) {
  const int oc = weight.dims.n, ic = weight.dims.c;
  const int kh = weight.dims.h, kw = weight.dims.w;
  if (x.dims.c != ic) {
    throw ShapeError("conv2d: input " + x.dims.str() + " has " +
                     std::to_string(x.dims.c) + " channels but weight " +
                     weight.dims.str() + " expects " + std::to_string(ic));
  }
  require(stride >= 1, "conv2d: stride must be >= 1");
  require(pad >= 0, "conv2d: padding must be >= 0");
  const int oh = conv_out_extent(x.dims.h, kh, stride, pad, "h");
  const int ow = conv_out_extent(x.dims.w, kw, stride, pad, "w");
  if (bias != nullptr && !(bias->dims == Dims{1, oc, 1, 1})) {
    throw ShapeError("conv2d: bias " + bias->dims.str() + " must be (1," +
                     std::to_string(oc) + ",1,1)");
  }

  TensorT<T> out({x.dims.n, oc, oh, ow});
  const int64_t kdim = static_cast<int64_t>(ic) * kh * kw;
  const int64_t plane = static_cast<int64_t>(oh) * ow;

  if (kh == 1 && kw == 1 && stride == 1 && pad == 0) {
    for (int n = 0; n < x.dims.n; ++n) {
      detail::gemm_nn(weight.data.data(), x.plane(n, 0), out.plane(n, 0), oc,
                      plane, kdim);
    }
  } else {
    int rows_per_strip = static_cast<int>(
        std::clamp<int64_t>(kPanelBudget / std::max<int64_t>(1, kdim * ow), 1, oh));
    static thread_local std::vector<T> panel;
    if (panel.size() < static_cast<std::size_t>(kdim * rows_per_strip * ow)) {
      panel.resize(kdim * rows_per_strip * ow);
    }
    for (int n = 0; n < x.dims.n; ++n) {
      for (int oy0 = 0; oy0 < oh; oy0 += rows_per_strip) {
        const int oy1 = std::min(oh, oy0 + rows_per_strip);
        const int64_t cols = static_cast<int64_t>(oy1 - oy0) * ow;
        im2col_strip(x, n, kh, kw, stride, pad, oh, ow, oy0, oy1, panel.data());
        detail::gemm_nn_ldc(weight.data.data(), panel.data(),
                            out.plane(n, 0) + static_cast<int64_t>(oy0) * ow, oc,
                            cols, kdim, plane);
      }
    }
  }
  if (bias != nullptr) add_bias_planes(out, *bias);
  return out;
}

template <typename T>
TensorT<T> conv2d(const TensorT<T>& x, const Conv2DParamsT<T>& p) {
  return conv2d(x, p.weight, p.bias ? &*p.bias : nullptr, p.stride, p.padding);
}

// ---------------------------------------------------------------------------
// conv_transpose2d
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> conv_transpose2d(const TensorT<T>& x, const TensorT<T>& weight,
                            std::type_identity_t<const TensorT<T>*> bias,
                            int stride, int pad) {
  const int ci = weight.dims.n, co = weight.dims.c;
  const int kh = weight.dims.h, kw = weight.dims.w;
  if (x.dims.c != ci) {
    throw ShapeError("conv_transpose2d: input " + x.dims.str() + " has " +
                     std::to_string(x.dims.c) + " channels but weight " +
                     weight.dims.str() + " expects " + std::to_string(ci));
  }
  require(stride >= 1, "conv_transpose2d: stride must be >= 1");
  require(pad >= 0, "conv_transpose2d: padding must be >= 0");
  const int oh = (x.dims.h - 1) * stride - 2 * pad + kh;
  const int ow = (x.dims.w - 1) * stride - 2 * pad + kw;
  if (oh < 1 || ow < 1) {
    throw ShapeError("conv_transpose2d: computed output size (" +
                     std::to_string(oh) + "x" + std::to_string(ow) +
                     ") is not positive for input " + x.dims.str());
  }
  if (bias != nullptr && !(bias->dims == Dims{1, co, 1, 1})) {
    throw ShapeError("conv_transpose2d: bias " + bias->dims.str() +
                     " must be (1," + std::to_string(co) + ",1,1)");
  }

  // W (ci, co, kh, kw) transposed to an A matrix [co*kh*kw x ci].
  const int64_t kk = static_cast<int64_t>(kh) * kw;
  std::vector<T> wt(static_cast<int64_t>(co) * kk * ci);
  for (int a = 0; a < ci; ++a) {
    for (int b = 0; b < co; ++b) {
      for (int64_t t = 0; t < kk; ++t) {
        wt[(b * kk + t) * ci + a] = weight.data[(static_cast<int64_t>(a) * co + b) * kk + t];
      }
    }
  }

  TensorT<T> out({x.dims.n, co, oh, ow});
  const int64_t m = static_cast<int64_t>(co) * kk;
  const int ih = x.dims.h, iw = x.dims.w;
  // Strips cover whole input rows so col2im works on aligned spans.
  const int rows_per_strip = static_cast<int>(std::clamp<int64_t>(
      kPanelBudget / std::max<int64_t>(1, m * iw), 1, ih));
  static thread_local std::vector<T> cols;
  if (cols.size() < static_cast<std::size_t>(m * rows_per_strip * iw)) {
    cols.resize(m * static_cast<int64_t>(rows_per_strip) * iw);
  }
  static thread_local std::vector<T> slice;

  for (int n = 0; n < x.dims.n; ++n) {
    for (int iy0 = 0; iy0 < ih; iy0 += rows_per_strip) {
      const int iy1 = std::min(ih, iy0 + rows_per_strip);
      const int64_t ncols = static_cast<int64_t>(iy1 - iy0) * iw;
      // cols[m x ncols] = Wt * x_n[:, iy0:iy1, :]; the x rows are
      // plane-strided, so gather them when the strip is partial.
      if (ncols == static_cast<int64_t>(ih) * iw) {
        detail::gemm_nn(wt.data(), x.plane(n, 0), cols.data(), m, ncols,
                        static_cast<int64_t>(ci));
      } else {
        slice.resize(static_cast<int64_t>(ci) * ncols);
        for (int c = 0; c < ci; ++c) {
          std::memcpy(slice.data() + c * ncols,
                      x.plane(n, c) + static_cast<int64_t>(iy0) * iw,
                      ncols * sizeof(T));
        }
        detail::gemm_nn(wt.data(), slice.data(), cols.data(), m, ncols,
                        static_cast<int64_t>(ci));
      }
      col2im_add(cols.data(), co, kh, kw, stride, pad, iw, iy0, iy1,
                 out.plane(n, 0), oh, ow);
    }
  }
  if (bias != nullptr) add_bias_planes(out, *bias);
  return out;
}

template <typename T>
TensorT<T> conv_transpose2d(const TensorT<T>& x, const Conv2DParamsT<T>& p) {
  return conv_transpose2d(x, p.weight, p.bias ? &*p.bias : nullptr, p.stride,
                          p.padding);
}

// ---------------------------------------------------------------------------
// conv_grad_weight
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> conv_grad_weight(const TensorT<T>& small, const TensorT<T>& large,
                            int kh, int kw, int stride, int pad) {
  require(small.dims.n == large.dims.n, "conv_grad_weight: batch mismatch");
  const int64_t m = small.dims.c;
  const int64_t width = static_cast<int64_t>(large.dims.c) * kh * kw;
  const int grid_h = small.dims.h, grid_w = small.dims.w;
  std::vector<double> acc(m * width, 0.0);

  // Whole grid rows per strip; the strip size is also the GEMM reduction
  // length, so cap it to keep the per-thread pack buffer small.
  const int rows_per_strip = static_cast<int>(std::clamp<int64_t>(
      std::min<int64_t>(kPanelBudget / std::max<int64_t>(1, width * grid_w), 16384 / grid_w),
      1, grid_h));
  static thread_local std::vector<T> panel;
  if (panel.size() < static_cast<std::size_t>(rows_per_strip * grid_w * width)) {
    panel.resize(static_cast<int64_t>(rows_per_strip) * grid_w * width);
  }
  static thread_local std::vector<T> a_slice;
  if (a_slice.size() < static_cast<std::size_t>(m * rows_per_strip * grid_w)) {
    a_slice.resize(m * static_cast<int64_t>(rows_per_strip) * grid_w);
  }

  for (int n = 0; n < small.dims.n; ++n) {
    for (int oy0 = 0; oy0 < grid_h; oy0 += rows_per_strip) {
      const int oy1 = std::min(grid_h, oy0 + rows_per_strip);
      const int64_t kdim = static_cast<int64_t>(oy1 - oy0) * grid_w;
      im2row_strip(large, n, kh, kw, stride, pad, grid_w, oy0, oy1, panel.data());
      // A slice [m x kdim] from the plane-strided small map.
      for (int64_t c = 0; c < m; ++c) {
        std::memcpy(a_slice.data() + c * kdim,
                    small.plane(n, static_cast<int>(c)) +
                        static_cast<int64_t>(oy0) * grid_w,
                    kdim * sizeof(T));
      }
      detail::gemm_nn_acc(a_slice.data(), panel.data(), acc.data(), m, width,
                          kdim);
    }
  }

  TensorT<T> gw({static_cast<int>(m), large.dims.c, kh, kw});
  for (std::size_t i = 0; i < gw.data.size(); ++i) {
    gw.data[i] = static_cast<T>(acc[i]);
  }
  return gw;
}

template <typename T>
TensorT<T> sum_over_batch_spatial(const TensorT<T>& g) {
  TensorT<T> out({1, g.dims.c, 1, 1});
  const int64_t hw = static_cast<int64_t>(g.dims.h) * g.dims.w;
#pragma omp parallel for schedule(static)
  for (int c = 0; c < g.dims.c; ++c) {
    double s = 0.0;
    for (int n = 0; n < g.dims.n; ++n) {
      const T* p = g.plane(n, c);
      for (int64_t i = 0; i < hw; ++i) s += static_cast<double>(p[i]);
    }
    out.data[c] = static_cast<T>(s);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Pooling, normalization, activations
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> maxpool2d(const TensorT<T>& x, std::vector<std::int64_t>* argmax) {
  if (x.dims.h % 2 != 0 || x.dims.w % 2 != 0) {
    throw ShapeError("maxpool2d: spatial dims must be even, got " + x.dims.str());
  }
  const int oh = x.dims.h / 2, ow = x.dims.w / 2;
  TensorT<T> out({x.dims.n, x.dims.c, oh, ow});
  if (argmax != nullptr) argmax->assign(out.data.size(), 0);

  const int planes = x.dims.n * x.dims.c;
#pragma omp parallel for schedule(static)
  for (int pc = 0; pc < planes; ++pc) {
    const int n = pc / x.dims.c, c = pc % x.dims.c;
    const T* src = x.plane(n, c);
    T* dst = out.plane(n, c);
    const int64_t base_out = out.index(n, c, 0, 0);
    const int64_t base_in = x.index(n, c, 0, 0);
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox) {
        const int iy = oy * 2, ix = ox * 2;
        // First maximum in row-major window order wins on ties.
        int64_t best = static_cast<int64_t>(iy) * x.dims.w + ix;
        T bv = src[best];
        const int64_t cand[3] = {best + 1, best + x.dims.w, best + x.dims.w + 1};
        for (int64_t idx : cand) {
          if (src[idx] > bv) {
            bv = src[idx];
            best = idx;
          }
        }
        dst[static_cast<int64_t>(oy) * ow + ox] = bv;
        if (argmax != nullptr) {
          (*argmax)[base_out + static_cast<int64_t>(oy) * ow + ox] = base_in + best;
        }
      }
    }
  }
  return out;
}

template <typename T>
static void check_bn_channels(const TensorT<T>& x, const BatchNormParamsT<T>& p) {
  const Dims want{1, x.dims.c, 1, 1};
  if (!(p.gamma.dims == want) || !(p.beta.dims == want) ||
      !(p.running_mean.dims == want) || !(p.running_var.dims == want)) {
    throw ShapeError("batch_norm2d: parameter vectors must be (1," +
                     std::to_string(x.dims.c) + ",1,1) for input " + x.dims.str());
  }
}

template <typename T>
TensorT<T> batch_norm2d_infer(const TensorT<T>& x, const BatchNormParamsT<T>& p) {
  check_bn_channels(x, p);
  for (T v : p.running_var.data) {
    if (v < T(0)) {
      throw ContractError("batch_norm2d: running_var must be non-negative");
    }
  }
  TensorT<T> out(x.dims);
  const int64_t hw = static_cast<int64_t>(x.dims.h) * x.dims.w;
#pragma omp parallel for schedule(static)
  for (int c = 0; c < x.dims.c; ++c) {
    const double inv = 1.0 / std::sqrt(static_cast<double>(p.running_var.data[c]) +
                                       static_cast<double>(p.epsilon));
    const double g = static_cast<double>(p.gamma.data[c]) * inv;
    const double b = static_cast<double>(p.beta.data[c]) -
                     g * static_cast<double>(p.running_mean.data[c]);
    for (int n = 0; n < x.dims.n; ++n) {
      const T* src = x.plane(n, c);
      T* dst = out.plane(n, c);
      for (int64_t i = 0; i < hw; ++i) {
        dst[i] = static_cast<T>(g * static_cast<double>(src[i]) + b);
      }
    }
  }
  return out;
}

template <typename T>
TensorT<T> batch_norm2d_train(const TensorT<T>& x, BatchNormParamsT<T>& p,
                              std::vector<T>* saved_mean,
                              std::vector<T>* saved_invstd) {
  check_bn_channels(x, p);
  TensorT<T> out(x.dims);
  const int64_t hw = static_cast<int64_t>(x.dims.h) * x.dims.w;
  const int64_t count = static_cast<int64_t>(x.dims.n) * hw;
  if (saved_mean != nullptr) saved_mean->assign(x.dims.c, T(0));
  if (saved_invstd != nullptr) saved_invstd->assign(x.dims.c, T(0));

#pragma omp parallel for schedule(static)
  for (int c = 0; c < x.dims.c; ++c) {
    double sum = 0.0, sumsq = 0.0;
    for (int n = 0; n < x.dims.n; ++n) {
      const T* src = x.plane(n, c);
      for (int64_t i = 0; i < hw; ++i) {
        const double v = static_cast<double>(src[i]);
        sum += v;
        sumsq += v * v;
      }
    }
    const double mean = sum / static_cast<double>(count);
    // Biased (population) variance.
    double var = sumsq / static_cast<double>(count) - mean * mean;
    if (var < 0.0) var = 0.0;
    const double inv = 1.0 / std::sqrt(var + static_cast<double>(p.epsilon));
    const double g = static_cast<double>(p.gamma.data[c]);
    const double b = static_cast<double>(p.beta.data[c]);
    for (int n = 0; n < x.dims.n; ++n) {
      const T* src = x.plane(n, c);
      T* dst = out.plane(n, c);
      for (int64_t i = 0; i < hw; ++i) {
        dst[i] = static_cast<T>(g * ((static_cast<double>(src[i]) - mean) * inv) + b);
      }
    }
    const double mom = static_cast<double>(p.momentum);
    p.running_mean.data[c] = static_cast<T>(
        mom * static_cast<double>(p.running_mean.data[c]) + (1.0 - mom) * mean);
    p.running_var.data[c] = static_cast<T>(
        mom * static_cast<double>(p.running_var.data[c]) + (1.0 - mom) * var);
    if (saved_mean != nullptr) (*saved_mean)[c] = static_cast<T>(mean);
    if (saved_invstd != nullptr) (*saved_invstd)[c] = static_cast<T>(inv);
  }
  return out;
}

template <typename T>
TensorT<T> batch_norm2d(const TensorT<T>& x, BatchNormParamsT<T>& p, BnMode mode) {
  return mode == BnMode::train ? batch_norm2d_train(x, p)
                               : batch_norm2d_infer(x, p);
}

template <typename T>
TensorT<T> relu(const TensorT<T>& x) {
  TensorT<T> out(x.dims);
  const int64_t total = x.size();
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < total; ++i) {
    out.data[i] = x.data[i] > T(0) ? x.data[i] : T(0);
  }
  return out;
}

template <typename T>
TensorT<T> sigmoid(const TensorT<T>& x) {
  TensorT<T> out(x.dims);
  const T hi = std::nextafter(T(1), T(0));
  const T lo = std::numeric_limits<T>::min();
  const int64_t total = x.size();
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < total; ++i) {
    const T v = x.data[i];
    T r;
    if (v >= T(0)) {
      r = T(1) / (T(1) + std::exp(-v));
    } else {
      const T e = std::exp(v);
      r = e / (T(1) + e);
    }
    out.data[i] = std::clamp(r, lo, hi);
  }
  return out;
}

template <typename T>
TensorT<T> apply_activation(const TensorT<T>& x, Activation kind) {
  return kind == Activation::relu ? relu(x) : sigmoid(x);
}

template <typename T>
TensorT<T> global_avg_pool(const TensorT<T>& x) {
  TensorT<T> out({x.dims.n, x.dims.c, 1, 1});
  const int64_t hw = static_cast<int64_t>(x.dims.h) * x.dims.w;
  const int planes = x.dims.n * x.dims.c;
#pragma omp parallel for schedule(static)
  for (int pc = 0; pc < planes; ++pc) {
    const int n = pc / x.dims.c, c = pc % x.dims.c;
    const T* src = x.plane(n, c);
    double s = 0.0;
    for (int64_t i = 0; i < hw; ++i) s += static_cast<double>(src[i]);
    out.at(n, c, 0, 0) = static_cast<T>(s / static_cast<double>(hw));
  }
  return out;
}

template <typename T>
TensorT<T> dense(const TensorT<T>& x, const TensorT<T>& weight,
                 std::type_identity_t<const TensorT<T>*> bias) {
  if (x.dims.h != 1 || x.dims.w != 1) {
    throw ShapeError("dense: input must be (n,c,1,1), got " + x.dims.str());
  }
  const int in = weight.dims.c, outc = weight.dims.n;
  if (weight.dims.h != 1 || weight.dims.w != 1 || x.dims.c != in) {
    throw ShapeError("dense: input " + x.dims.str() + " incompatible with weight " +
                     weight.dims.str());
  }
  if (bias != nullptr && !(bias->dims == Dims{1, outc, 1, 1})) {
    throw ShapeError("dense: bias " + bias->dims.str() + " must be (1," +
                     std::to_string(outc) + ",1,1)");
  }
  TensorT<T> out({x.dims.n, outc, 1, 1});
  for (int n = 0; n < x.dims.n; ++n) {
    const T* xv = x.plane(n, 0);
    for (int o = 0; o < outc; ++o) {
      double s = bias != nullptr ? static_cast<double>(bias->data[o]) : 0.0;
      const T* wrow = weight.data.data() + static_cast<int64_t>(o) * in;
      for (int i = 0; i < in; ++i) {
        s += static_cast<double>(wrow[i]) * static_cast<double>(xv[i]);
      }
      out.at(n, o, 0, 0) = static_cast<T>(s);
    }
  }
  return out;
}

template <typename T>
TensorT<T> concat_channels(const std::vector<const TensorT<T>*>& xs) {
  if (xs.empty()) throw ShapeError("concat_channels: no inputs");
  const Dims& d0 = xs[0]->dims;
  int channels = 0;
  for (const auto* t : xs) {
    if (t->dims.n != d0.n || t->dims.h != d0.h || t->dims.w != d0.w) {
      throw ShapeError("concat_channels: input " + t->dims.str() +
                       " does not match " + d0.str() + " on batch/spatial dims");
    }
    channels += t->dims.c;
  }
  TensorT<T> out({d0.n, channels, d0.h, d0.w});
  const int64_t hw = static_cast<int64_t>(d0.h) * d0.w;
  for (int n = 0; n < d0.n; ++n) {
    int c_off = 0;
    for (const auto* t : xs) {
      std::memcpy(out.plane(n, c_off), t->plane(n, 0),
                  static_cast<int64_t>(t->dims.c) * hw * sizeof(T));
      c_off += t->dims.c;
    }
  }
  return out;
}

template <typename T>
TensorT<T> add_elementwise(const TensorT<T>& a, const TensorT<T>& b) {
  if (!(a.dims == b.dims)) {
    throw ShapeError("add_elementwise: shape mismatch " + a.dims.str() + " vs " +
                     b.dims.str());
  }
  TensorT<T> out(a.dims);
  const int64_t total = a.size();
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < total; ++i) out.data[i] = a.data[i] + b.data[i];
  return out;
}

template <typename T>
TensorT<T> scale_channels(const TensorT<T>& x, const TensorT<T>& scale) {
  if (scale.dims.n != x.dims.n || scale.dims.c != x.dims.c ||
      scale.dims.h != 1 || scale.dims.w != 1) {
    throw ShapeError("scale_channels: scale " + scale.dims.str() +
                     " must be (" + std::to_string(x.dims.n) + "," +
                     std::to_string(x.dims.c) + ",1,1) for input " + x.dims.str());
  }
  TensorT<T> out(x.dims);
  const int64_t hw = static_cast<int64_t>(x.dims.h) * x.dims.w;
  const int planes = x.dims.n * x.dims.c;
#pragma omp parallel for schedule(static)
  for (int pc = 0; pc < planes; ++pc) {
    const int n = pc / x.dims.c, c = pc % x.dims.c;
    const T s = scale.at(n, c, 0, 0);
    const T* src = x.plane(n, c);
    T* dst = out.plane(n, c);
    for (int64_t i = 0; i < hw; ++i) dst[i] = src[i] * s;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Explicit instantiations
// ---------------------------------------------------------------------------

#define POLYPSEG_INSTANTIATE_KERNELS(T)                                          \
  template struct BatchNormParamsT<T>;                                          \
  template TensorT<T> conv2d<T>(const TensorT<T>&, const TensorT<T>&,           \
                                const TensorT<T>*, int, int);                   \
  template TensorT<T> conv2d<T>(const TensorT<T>&, const Conv2DParamsT<T>&);    \
  template TensorT<T> conv_transpose2d<T>(const TensorT<T>&, const TensorT<T>&, \
                                          const TensorT<T>*, int, int);         \
  template TensorT<T> conv_transpose2d<T>(const TensorT<T>&,                    \
                                          const Conv2DParamsT<T>&);             \
  template TensorT<T> conv_grad_weight<T>(const TensorT<T>&, const TensorT<T>&, \
                                          int, int, int, int);                  \
  template TensorT<T> sum_over_batch_spatial<T>(const TensorT<T>&);             \
  template TensorT<T> maxpool2d<T>(const TensorT<T>&, std::vector<std::int64_t>*); \
  template TensorT<T> batch_norm2d_infer<T>(const TensorT<T>&,                  \
                                            const BatchNormParamsT<T>&);        \
  template TensorT<T> batch_norm2d_train<T>(const TensorT<T>&,                  \
                                            BatchNormParamsT<T>&,               \
                                            std::vector<T>*, std::vector<T>*);  \
  template TensorT<T> batch_norm2d<T>(const TensorT<T>&, BatchNormParamsT<T>&,  \
                                      BnMode);                                  \
  template TensorT<T> relu<T>(const TensorT<T>&);                               \
  template TensorT<T> sigmoid<T>(const TensorT<T>&);                            \
  template TensorT<T> apply_activation<T>(const TensorT<T>&, Activation);       \
  template TensorT<T> global_avg_pool<T>(const TensorT<T>&);                    \
  template TensorT<T> dense<T>(const TensorT<T>&, const TensorT<T>&,            \
                               const TensorT<T>*);                              \
  template TensorT<T> concat_channels<T>(const std::vector<const TensorT<T>*>&); \
  template TensorT<T> add_elementwise<T>(const TensorT<T>&, const TensorT<T>&); \
  template TensorT<T> scale_channels<T>(const TensorT<T>&, const TensorT<T>&);

POLYPSEG_INSTANTIATE_KERNELS(float)
POLYPSEG_INSTANTIATE_KERNELS(double)

#undef POLYPSEG_INSTANTIATE_KERNELS

}  // namespace polypseg
