// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <type_traits>
#include <vector>

#include "polypseg/tensor.hpp"

namespace polypseg {

enum class Activation { relu, sigmoid };
enum class BnMode { train, infer };

/// Convolution parameters. For conv2d the weight is (out_ch, in_ch, kh, kw);
/// for conv_transpose2d it is (in_ch, out_ch, kh, kw), so the same weight
/// tensor satisfies the adjoint identity
///   <conv2d(y, W), x> == <y, conv_transpose2d(x, W)>.
/// Bias is carried as a (1, out_ch, 1, 1) tensor when present.
template <typename T>
struct Conv2DParamsT {
  TensorT<T> weight;
  std::optional<TensorT<T>> bias;
  int stride = 1;
  int padding = 0;
};
using Conv2DParams = Conv2DParamsT<float>;

/// Per-channel affine + running statistics, all carried as (1,c,1,1).
template <typename T>
struct BatchNormParamsT {
  TensorT<T> gamma;
  TensorT<T> beta;
  TensorT<T> running_mean;
  TensorT<T> running_var;
  T epsilon = T(1e-5);
  T momentum = T(0.9);

  static BatchNormParamsT identity(int channels, T eps = T(1e-5), T momentum = T(0.9));
};
using BatchNormParams = BatchNormParamsT<float>;

// ---------------------------------------------------------------------------
// Forward kernels. Inputs are never modified (batch_norm2d train mode updates
// the running statistics in `p`, nothing else). Every kernel accumulates in
// double and rounds once on store, so results are independent of worker count.
// ---------------------------------------------------------------------------

/// Cross-correlation (no kernel flip). Requires exact output division:
/// (h + 2*pad - kh) and (w + 2*pad - kw) must be non-negative multiples of
/// stride.
template <typename T>
TensorT<T> conv2d(const TensorT<T>& x, const TensorT<T>& weight,
                  std::type_identity_t<const TensorT<T>*> bias, int stride,
                  int pad);

template <typename T>
TensorT<T> conv2d(const TensorT<T>& x, const Conv2DParamsT<T>& p);

/// Adjoint of conv2d: each input element scatters value*kernel into the
/// output window. Output spatial size = (in - 1)*stride - 2*pad + k.
template <typename T>
TensorT<T> conv_transpose2d(const TensorT<T>& x, const TensorT<T>& weight,
                            std::type_identity_t<const TensorT<T>*> bias,
                            int stride, int pad);

template <typename T>
TensorT<T> conv_transpose2d(const TensorT<T>& x, const Conv2DParamsT<T>& p);

/// 2x2 window, stride 2. Spatial dims must be even. When `argmax` is given it
/// receives, per output element, the flat input index of the first maximal
/// element in row-major window order.
template <typename T>
TensorT<T> maxpool2d(const TensorT<T>& x, std::vector<std::int64_t>* argmax = nullptr);

template <typename T>
TensorT<T> batch_norm2d_infer(const TensorT<T>& x, const BatchNormParamsT<T>& p);

/// Normalizes with batch statistics (biased variance over n,h,w) and updates
/// running stats as running <- momentum*running + (1-momentum)*batch.
/// `saved_mean` / `saved_invstd` receive the batch statistics for backward.
template <typename T>
TensorT<T> batch_norm2d_train(const TensorT<T>& x, BatchNormParamsT<T>& p,
                              std::vector<T>* saved_mean = nullptr,
                              std::vector<T>* saved_invstd = nullptr);

template <typename T>
TensorT<T> batch_norm2d(const TensorT<T>& x, BatchNormParamsT<T>& p, BnMode mode);

template <typename T>
TensorT<T> relu(const TensorT<T>& x);

/// Numerically stable; output clamped into the open interval (0,1) so that
/// even saturated inputs (|x| up to 100 and beyond) never round to 0 or 1.
template <typename T>
TensorT<T> sigmoid(const TensorT<T>& x);

template <typename T>
TensorT<T> apply_activation(const TensorT<T>& x, Activation kind);

/// (n,c,h,w) -> (n,c,1,1), mean over h*w.
template <typename T>
TensorT<T> global_avg_pool(const TensorT<T>& x);

/// x: (n,in,1,1), weight: (out,in,1,1), bias: (1,out,1,1) or null.
template <typename T>
TensorT<T> dense(const TensorT<T>& x, const TensorT<T>& weight,
                 std::type_identity_t<const TensorT<T>*> bias);

/// Channel concatenation in argument order; all inputs share n,h,w.
template <typename T>
TensorT<T> concat_channels(const std::vector<const TensorT<T>*>& xs);

template <typename T>
TensorT<T> add_elementwise(const TensorT<T>& a, const TensorT<T>& b);

/// scale: (n,c,1,1) broadcast over h,w.
template <typename T>
TensorT<T> scale_channels(const TensorT<T>& x, const TensorT<T>& scale);

// ---------------------------------------------------------------------------
// Gradient kernels (used by the autograd tape).
// ---------------------------------------------------------------------------

/// Weight gradient shared by conv2d and conv_transpose2d:
///   gw[a,b,ky,kx] = sum_{n,oy,ox} small[n,a,oy,ox] *
///                   large[n,b, oy*stride - pad + ky, ox*stride - pad + kx]
/// where `small` is the map on the strided grid (grad-out for conv2d, input
/// for conv_transpose2d) and `large` is the other one.
template <typename T>
TensorT<T> conv_grad_weight(const TensorT<T>& small, const TensorT<T>& large,
                            int kh, int kw, int stride, int pad);

/// Bias gradient: per-channel sum over batch and spatial dims -> (1,c,1,1).
template <typename T>
TensorT<T> sum_over_batch_spatial(const TensorT<T>& g);

namespace detail {

/// C[M x N] = A[M x K] * B[K x N], row-major, double accumulation per output
/// element in fixed k order; each element is written by exactly one worker.
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, std::int64_t m, std::int64_t n,
             std::int64_t k);

/// Same product accumulated into a caller-owned double buffer (used to sum
/// weight gradients across batch items before the single final rounding).
template <typename T>
void gemm_nn_acc(const T* a, const T* b, double* c_acc, std::int64_t m,
                 std::int64_t n, std::int64_t k);

}  // namespace detail

}  // namespace polypseg
