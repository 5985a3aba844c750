// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "polypseg/kernels.hpp"
#include "polypseg/tensor.hpp"

namespace polypseg {

/// Define-by-run reverse-mode tape. Every op records the eager kernel result
/// (bit-exact with a direct call) plus a backward rule. Nodes are identified
/// by insertion index; inputs always precede their consumers. A tape is
/// single-owner; distinct tapes may run concurrently.
///
/// Backward walks the nodes in reverse insertion order with sequential
/// accumulation, so two runs over the same tape give bit-identical gradients.
/// ReLU uses subgradient 0 at exactly 0; maxpool routes ties to the first
/// maximal element in row-major window order.
template <typename T>
class TapeT {
public:
  using Ten = TensorT<T>;

  /// Records a leaf. Trainable leaves receive gradients in backward().
  int leaf(Ten value, bool trainable = false);

  int size() const { return static_cast<int>(nodes_.size()); }
  bool empty() const { return nodes_.empty(); }

  const Ten& value(int id) const { return node(id).value; }

  /// Gradient of the last backward() run. Zero tensor for nodes the loss
  /// does not reach.
  const Ten& grad(int id) const;

  bool requires_grad(int id) const { return node(id).requires_grad; }

  // Recorded operations. `bias` is -1 when absent.
  int conv2d(int x, int w, int bias, int stride, int pad);
  int conv_transpose2d(int x, int w, int bias, int stride, int pad);
  int maxpool2d(int x);
  /// Train-mode batch norm. Running statistics live outside the tape (they
  /// are state, not differentiable inputs) and are updated during recording
  /// when non-null.
  int batch_norm2d_train(int x, int gamma, int beta, Ten* running_mean,
                         Ten* running_var, T epsilon, T momentum);
  int relu(int x);
  int sigmoid(int x);
  int dense(int x, int w, int bias);
  int global_avg_pool(int x);
  int concat_channels(const std::vector<int>& xs);
  int add(int a, int b);
  int scale_channels(int x, int scale);
  /// Scalar sum of all elements -> (1,1,1,1).
  int sum(int x);
  /// Scalar sum of x * weights (weights constant), used to seed gradient
  /// checks with a non-uniform cotangent.
  int weighted_sum(int x, Ten weights);
  /// BCE (probabilities clamped to [1e-7, 1-1e-7]) plus soft Dice loss with
  /// smoothing constant 1, both over the whole batch -> scalar.
  int dice_bce_loss(int pred, Ten target);

  /// Populates gradients for every node reachable from `loss`, which must be
  /// scalar. A no-op on an empty tape.
  void backward(int loss);

private:
  struct Node {
    Ten value;
    Ten grad;
    bool requires_grad = false;
    bool reached = false;
    std::function<void(TapeT&, int)> backward_fn;
  };

  const Node& node(int id) const;
  Node& node(int id);
  int push(Ten value, bool needs_grad, std::function<void(TapeT&, int)> fn);
  void accumulate(int id, const Ten& g);

  std::vector<Node> nodes_;
  bool have_grads_ = false;
};

using Tape = TapeT<float>;
using Tape64 = TapeT<double>;

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

struct AdamConfig {
  float lr = 1e-4f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float epsilon = 1e-8f;
};

/// Per-parameter first/second moments, parallel to the parameter list given
/// at construction.
struct AdamState {
  explicit AdamState(AdamConfig cfg = {}) : config(cfg) {}

  AdamConfig config;
  std::int64_t step_count = 0;
  std::vector<Tensor> m;
  std::vector<Tensor> v;
};

/// One bias-corrected Adam update. params and grads are parallel lists;
/// moment tensors are created on the first step. Update arithmetic runs in
/// double and rounds once into the float parameters.
void adam_step(const std::vector<Tensor*>& params,
               const std::vector<const Tensor*>& grads, AdamState& state);

// ---------------------------------------------------------------------------
// Finite-difference verification
// ---------------------------------------------------------------------------

/// Builds a scalar-valued graph from a leaf holding x. Must be deterministic.
using GraphBuilder = std::function<int(TapeT<double>&, int x_id)>;

/// Central-difference check of the tape gradient with respect to x, computed
/// in double. Returns max over elements of
///   |analytic - numeric| / max(1, |analytic|).
double finite_diff_check(const GraphBuilder& build, const TensorT<double>& x,
                         double eps);

}  // namespace polypseg
