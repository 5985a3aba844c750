// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "polypseg/autograd.hpp"
#include "polypseg/kernels.hpp"
#include "polypseg/tensor.hpp"

namespace polypseg {

enum class Mode { train, infer };

/// Encoder-decoder segmentation network: four encoder stages of residual
/// blocks (32/64/128/256 filters) with 2x2 maxpool between them, four decoder
/// stages (128/64/32/16) fed by 4x4 stride-2 transpose convs and same
/// resolution skip concatenations, and a multi-scale head that upsamples the
/// last three decoder outputs to full resolution, concatenates them with the
/// first skip (144 channels) and applies a 1x1 convolution + sigmoid.
struct ArchConfig {
  int input_size = 512;  // must be divisible by 16
  int in_ch = 3;
  std::array<int, 4> encoder_filters{32, 64, 128, 256};
  std::array<int, 4> decoder_filters{128, 64, 32, 16};
  int se_ratio = 8;  // SE hidden size = max(1, channels / se_ratio)
  float bn_epsilon = 1e-5f;
  float bn_momentum = 0.9f;
};

/// Ordered, uniquely named parameter tensors plus the architecture they
/// belong to. Running statistics and `meta.input_size` ride along with the
/// trainable weights; every tensor is rank 4.
class ModelParams {
public:
  ArchConfig arch;

  void add(const std::string& name, Tensor t);
  bool contains(const std::string& name) const;
  const Tensor& at(const std::string& name) const;
  Tensor& at(const std::string& name);

  const std::vector<std::string>& names() const { return order_; }
  std::size_t tensor_count() const { return order_.size(); }
  std::int64_t scalar_count() const;

  /// Names that receive gradients: everything except running statistics and
  /// the meta tensor.
  std::vector<std::string> trainable_names() const;
  static bool is_trainable_name(const std::string& name);

  /// Keeps arch.input_size and the meta.input_size tensor in sync.
  void set_input_size(int size);

private:
  std::vector<std::string> order_;
  std::unordered_map<std::string, Tensor> map_;
};

/// Allocates every tensor of the architecture (zero-filled) with its
/// normative dotted name. Throws ConfigError unless input_size is a positive
/// multiple of 16.
ModelParams build_model(const ArchConfig& arch = {});

/// He/Kaiming fan-in scaled normal init for conv and dense weights, zero
/// biases, identity batch-norm. Deterministic per seed.
void init_params(ModelParams& params, std::uint64_t seed);

struct ForwardOptions {
  Mode mode = Mode::infer;
  bool zero_skips = false;   // ablation: feed zeroed skip tensors to the decoder
  bool se_identity = false;  // ablation: bypass SE rescaling (scale = 1)
  std::vector<std::pair<std::string, Dims>>* shape_trace = nullptr;
  /// When set, receives copies of every traced stage tensor (eager path only).
  std::map<std::string, Tensor>* stage_capture = nullptr;
};

/// Eager forward pass. Output is (n,1,S,S) with every value in (0,1).
/// Train mode updates batch-norm running statistics in `params`.
Tensor model_forward(ModelParams& params, const Tensor& x,
                     const ForwardOptions& opts = {});

/// Inference-only overload; never mutates params.
Tensor model_forward(const ModelParams& params, const Tensor& x,
                     const ForwardOptions& opts = {});

/// Records the forward pass on a tape for training. Every trainable tensor
/// becomes a trainable leaf (listed in wiring order in `leaves`); batch-norm
/// runs in train mode and updates running statistics inside `params`.
struct TapeModelForward {
  int output = -1;
  std::vector<std::pair<std::string, int>> leaves;
};
TapeModelForward model_forward_tape(Tape& tape, ModelParams& params, int x_node);

// ---------------------------------------------------------------------------
// Standalone blocks
// ---------------------------------------------------------------------------

/// Squeeze-and-excitation: reduce then expand a pooled channel descriptor,
/// sigmoid it, and rescale the incoming feature maps.
struct SEBlockParams {
  Tensor reduce_weight;  // (hidden, c, 1, 1)
  Tensor reduce_bias;    // (1, hidden, 1, 1)
  Tensor expand_weight;  // (c, hidden, 1, 1)
  Tensor expand_bias;    // (1, c, 1, 1)
};

Tensor se_block_forward(const Tensor& x, const SEBlockParams& p);

/// conv-BN-ReLU-conv-BN-SE plus (projected) shortcut, then ReLU.
struct ResidualBlockParams {
  Tensor conv1_weight;  // (out, in, 3, 3), pad 1, no bias
  BatchNormParams bn1;
  Tensor conv2_weight;  // (out, out, 3, 3)
  BatchNormParams bn2;
  SEBlockParams se;
  std::optional<Tensor> shortcut_weight;  // (out, in, 1, 1) iff in != out
  std::optional<BatchNormParams> shortcut_bn;
};

Tensor residual_block_forward(const Tensor& x, ResidualBlockParams& p, Mode mode);

// ---------------------------------------------------------------------------
// Generic wiring (shared by the eager path, the training tape and the
// gradient-check suite; the network is defined exactly once).
// ---------------------------------------------------------------------------

/// Tape-backed wiring context over an arbitrary named tensor store.
template <typename T>
struct TapeCtx {
  using Value = int;

  TapeT<T>* tape = nullptr;
  std::function<TensorT<T>&(const std::string&)> store;
  std::function<bool(const std::string&)> has_name;
  T bn_epsilon = T(1e-5);
  T bn_momentum = T(0.9);
  std::vector<std::pair<std::string, int>>* leaf_log = nullptr;
  std::vector<std::pair<std::string, Dims>>* trace_log = nullptr;

  std::unordered_map<std::string, int> leaf_cache;

  Value param(const std::string& name);
  bool has(const std::string& name) const { return has_name(name); }
  Dims dims(Value v) const { return tape->value(v).dims; }
  void trace(const std::string& name, Value v);

  Value conv2d(Value x, Value w, Value b, int stride, int pad) {
    return tape->conv2d(x, w, b, stride, pad);
  }
  Value conv_transpose2d(Value x, Value w, Value b, int stride, int pad) {
    return tape->conv_transpose2d(x, w, b, stride, pad);
  }
  Value maxpool(Value x) { return tape->maxpool2d(x); }
  Value batch_norm(Value x, const std::string& prefix);
  Value relu(Value x) { return tape->relu(x); }
  Value sigmoid(Value x) { return tape->sigmoid(x); }
  Value dense(Value x, Value w, Value b) { return tape->dense(x, w, b); }
  Value gap(Value x) { return tape->global_avg_pool(x); }
  Value concat(const std::vector<Value>& xs) { return tape->concat_channels(xs); }
  Value add(Value a, Value b) { return tape->add(a, b); }
  Value scale_channels(Value x, Value s) { return tape->scale_channels(x, s); }
  Value zeros_like(Value x) {
    return tape->leaf(TensorT<T>::zeros(tape->value(x).dims), false);
  }

  static constexpr Value none() { return -1; }
};

/// Eager wiring context. `mutate` is only set in train mode and receives the
/// batch-norm running statistic updates.
template <typename T>
struct EagerCtx {
  using Value = std::shared_ptr<const TensorT<T>>;

  std::function<const TensorT<T>&(const std::string&)> store;
  std::function<TensorT<T>&(const std::string&)> mutate;  // empty => infer
  std::function<bool(const std::string&)> has_name;
  T bn_epsilon = T(1e-5);
  T bn_momentum = T(0.9);
  std::vector<std::pair<std::string, Dims>>* trace_log = nullptr;
  std::map<std::string, TensorT<T>>* capture = nullptr;

  Value param(const std::string& name) {
    // Aliases the stored tensor; parameters outlive the forward pass.
    return Value(&store(name), [](const TensorT<T>*) {});
  }
  bool has(const std::string& name) const { return has_name(name); }
  Dims dims(Value v) const { return v->dims; }
  void trace(const std::string& name, Value v) {
    if (trace_log) trace_log->emplace_back(name, v->dims);
    if (capture) capture->emplace(name, *v);
  }

  static Value wrap(TensorT<T> t) {
    return std::make_shared<const TensorT<T>>(std::move(t));
  }

  Value conv2d(Value x, Value w, Value b, int stride, int pad) {
    return wrap(polypseg::conv2d(*x, *w, b ? b.get() : nullptr, stride, pad));
  }
  Value conv_transpose2d(Value x, Value w, Value b, int stride, int pad) {
    return wrap(polypseg::conv_transpose2d(*x, *w, b ? b.get() : nullptr, stride, pad));
  }
  Value maxpool(Value x) { return wrap(polypseg::maxpool2d(*x)); }
  Value batch_norm(Value x, const std::string& prefix);
  Value relu(Value x) { return wrap(polypseg::relu(*x)); }
  Value sigmoid(Value x) { return wrap(polypseg::sigmoid(*x)); }
  Value dense(Value x, Value w, Value b) {
    return wrap(polypseg::dense(*x, *w, b ? b.get() : nullptr));
  }
  Value concat(const std::vector<Value>& xs) {
    std::vector<const TensorT<T>*> ptrs;
    ptrs.reserve(xs.size());
    for (const Value& v : xs) ptrs.push_back(v.get());
    return wrap(polypseg::concat_channels(ptrs));
  }
  Value gap(Value x) { return wrap(polypseg::global_avg_pool(*x)); }
  Value add(Value a, Value b) { return wrap(add_elementwise(*a, *b)); }
  Value scale_channels(Value x, Value s) {
    return wrap(polypseg::scale_channels(*x, *s));
  }
  Value zeros_like(Value x) { return wrap(TensorT<T>::zeros(x->dims)); }

  static Value none() { return nullptr; }
};

template <class Ctx>
typename Ctx::Value wire_se_block(Ctx& cx, typename Ctx::Value x,
                                  const std::string& prefix);

template <class Ctx>
typename Ctx::Value wire_residual_block(Ctx& cx, typename Ctx::Value x,
                                        const std::string& prefix,
                                        bool se_identity = false);

template <class Ctx>
typename Ctx::Value wire_model(Ctx& cx, typename Ctx::Value x,
                               bool zero_skips = false, bool se_identity = false);

// ---------------------------------------------------------------------------
// PFW1 weight files
// ---------------------------------------------------------------------------

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

/// Writes the PFW1 container: magic "PFW1", u32 version 1, u32 tensor count,
/// then per tensor u16 name length, name bytes, u8 dtype (0 = f32), u8 rank
/// (4), four u32 dims and the row-major f32 payload. Little-endian, no
/// padding, no checksum.
void write_pfw(const std::string& path, const std::vector<NamedTensor>& tensors);

/// Reads a PFW1 container. Distinct errors for bad magic, version mismatch,
/// truncation, duplicate names and non-finite payloads.
std::vector<NamedTensor> read_pfw(const std::string& path);

/// Serializes params in name order; round trips are byte-identical.
void save_weights(const ModelParams& params, const std::string& path);

/// Reads a weight file and validates the name/shape set against the
/// architecture implied by the file (meta.input_size plus the first
/// convolution's input channels).
ModelParams load_weights(const std::string& path);

}  // namespace polypseg
