// SPDX-License-Identifier: Apache-2.0
#include "polypseg/model.hpp"

#include <algorithm>
#include <cmath>

#include "polypseg/rng.hpp"

namespace polypseg {

// ---------------------------------------------------------------------------
// ModelParams
// ---------------------------------------------------------------------------

void ModelParams::add(const std::string& name, Tensor t) {
  if (map_.count(name) != 0) {
    throw ContractError("model params: duplicate tensor name '" + name + "'");
  }
  order_.push_back(name);
  map_.emplace(name, std::move(t));
}

bool ModelParams::contains(const std::string& name) const {
  return map_.count(name) != 0;
}

const Tensor& ModelParams::at(const std::string& name) const {
  auto it = map_.find(name);
  if (it == map_.end()) {
    throw ContractError("model params: unknown tensor name '" + name + "'");
  }
  return it->second;
}

Tensor& ModelParams::at(const std::string& name) {
  return const_cast<Tensor&>(static_cast<const ModelParams*>(this)->at(name));
}

std::int64_t ModelParams::scalar_count() const {
  std::int64_t total = 0;
  for (const auto& name : order_) total += at(name).size();
  return total;
}

bool ModelParams::is_trainable_name(const std::string& name) {
  auto ends_with = [&](const char* suffix) {
    const std::string s(suffix);
    return name.size() >= s.size() &&
           name.compare(name.size() - s.size(), s.size(), s) == 0;
  };
  return !ends_with(".running_mean") && !ends_with(".running_var") &&
         name != "meta.input_size";
}

std::vector<std::string> ModelParams::trainable_names() const {
  std::vector<std::string> out;
  for (const auto& name : order_) {
    if (is_trainable_name(name)) out.push_back(name);
  }
  return out;
}

void ModelParams::set_input_size(int size) {
  if (size < 16 || size % 16 != 0) {
    throw ConfigError("input size must be a positive multiple of 16, got " +
                      std::to_string(size));
  }
  arch.input_size = size;
  at("meta.input_size").data[0] = static_cast<float>(size);
}

// ---------------------------------------------------------------------------
// build_model
// ---------------------------------------------------------------------------

namespace {

int se_hidden(int channels, int ratio) { return std::max(1, channels / ratio); }

void add_bn(ModelParams& p, const std::string& prefix, int c) {
  p.add(prefix + ".gamma", Tensor::full({1, c, 1, 1}, 1.0f));
  p.add(prefix + ".beta", Tensor::zeros({1, c, 1, 1}));
  p.add(prefix + ".running_mean", Tensor::zeros({1, c, 1, 1}));
  p.add(prefix + ".running_var", Tensor::full({1, c, 1, 1}, 1.0f));
}

void add_residual_block(ModelParams& p, const std::string& prefix, int cin,
                        int cout, int se_ratio) {
  p.add(prefix + ".conv1.weight", Tensor::zeros({cout, cin, 3, 3}));
  add_bn(p, prefix + ".bn1", cout);
  p.add(prefix + ".conv2.weight", Tensor::zeros({cout, cout, 3, 3}));
  add_bn(p, prefix + ".bn2", cout);
  const int hidden = se_hidden(cout, se_ratio);
  p.add(prefix + ".se.reduce.weight", Tensor::zeros({hidden, cout, 1, 1}));
  p.add(prefix + ".se.reduce.bias", Tensor::zeros({1, hidden, 1, 1}));
  p.add(prefix + ".se.expand.weight", Tensor::zeros({cout, hidden, 1, 1}));
  p.add(prefix + ".se.expand.bias", Tensor::zeros({1, cout, 1, 1}));
  if (cin != cout) {
    p.add(prefix + ".shortcut.conv.weight", Tensor::zeros({cout, cin, 1, 1}));
    add_bn(p, prefix + ".shortcut.bn", cout);
  }
}

}  // namespace

ModelParams build_model(const ArchConfig& arch) {
  if (arch.input_size < 16 || arch.input_size % 16 != 0) {
    throw ConfigError("input size must be a positive multiple of 16, got " +
                      std::to_string(arch.input_size));
  }
  if (arch.in_ch < 1) {
    throw ConfigError("in_ch must be >= 1");
  }
  ModelParams p;
  p.arch = arch;

  int cin = arch.in_ch;
  for (int i = 0; i < 4; ++i) {
    const std::string prefix = "enc" + std::to_string(i + 1);
    const int f = arch.encoder_filters[i];
    add_residual_block(p, prefix + ".res1", cin, f, arch.se_ratio);
    add_residual_block(p, prefix + ".res2", f, f, arch.se_ratio);
    cin = f;
  }

  // Decoder: transpose convs preserve channel count; the residual blocks see
  // upsampled + skip channels.
  const std::array<int, 4> skip_ch = arch.encoder_filters;
  int dec_in = arch.encoder_filters[3];  // bridge channels
  for (int j = 0; j < 4; ++j) {
    const std::string prefix = "dec" + std::to_string(j + 1);
    const int f = arch.decoder_filters[j];
    p.add(prefix + ".up.weight", Tensor::zeros({dec_in, dec_in, 4, 4}));
    p.add(prefix + ".up.bias", Tensor::zeros({1, dec_in, 1, 1}));
    const int cat = dec_in + skip_ch[3 - j];
    add_residual_block(p, prefix + ".res1", cat, f, arch.se_ratio);
    add_residual_block(p, prefix + ".res2", f, f, arch.se_ratio);
    dec_in = f;
  }

  const int d2 = arch.decoder_filters[1];  // 64 at 1/4 resolution
  const int d3 = arch.decoder_filters[2];  // 32 at 1/2 resolution
  p.add("head.up4.weight", Tensor::zeros({d2, d2, 4, 4}));
  p.add("head.up4.bias", Tensor::zeros({1, d2, 1, 1}));
  p.add("head.up2.weight", Tensor::zeros({d3, d3, 4, 4}));
  p.add("head.up2.bias", Tensor::zeros({1, d3, 1, 1}));
  const int head_in = d2 + d3 + arch.decoder_filters[3] + arch.encoder_filters[0];
  p.add("head.conv.weight", Tensor::zeros({1, head_in, 1, 1}));
  p.add("head.conv.bias", Tensor::zeros({1, 1, 1, 1}));

  p.add("meta.input_size", Tensor::full({1, 1, 1, 1},
                                        static_cast<float>(arch.input_size)));
  return p;
}

// ---------------------------------------------------------------------------
// init_params
// ---------------------------------------------------------------------------

void init_params(ModelParams& params, std::uint64_t seed) {
  Rng rng(seed);
  for (const std::string& name : params.names()) {
    Tensor& t = params.at(name);
    const bool is_weight =
        name.size() >= 7 &&
        name.compare(name.size() - 7, 7, ".weight") == 0;
    if (!is_weight) continue;  // biases and BN tensors keep builder values
    // Fan-in = c*h*w for every weight layout in use: ic*k*k for conv, in for
    // dense, co*k*k for transpose conv (channel-preserving here, so it equals
    // the feeding fan).
    const std::int64_t fan_in =
        static_cast<std::int64_t>(t.dims.c) * t.dims.h * t.dims.w;
    const double std_dev = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (auto& v : t.data) {
      v = static_cast<float>(rng.next_normal() * std_dev);
    }
  }
}

// ---------------------------------------------------------------------------
// Wiring
// ---------------------------------------------------------------------------

template <typename T>
int TapeCtx<T>::param(const std::string& name) {
  auto it = leaf_cache.find(name);
  if (it != leaf_cache.end()) return it->second;
  const bool trainable = ModelParams::is_trainable_name(name);
  const int id = tape->leaf(store(name), trainable);
  leaf_cache.emplace(name, id);
  if (trainable && leaf_log) leaf_log->emplace_back(name, id);
  return id;
}

template <typename T>
void TapeCtx<T>::trace(const std::string& name, int v) {
  if (trace_log) trace_log->emplace_back(name, tape->value(v).dims);
}

template <typename T>
int TapeCtx<T>::batch_norm(int x, const std::string& prefix) {
  const int gamma = param(prefix + ".gamma");
  const int beta = param(prefix + ".beta");
  return tape->batch_norm2d_train(x, gamma, beta, &store(prefix + ".running_mean"),
                                  &store(prefix + ".running_var"), bn_epsilon,
                                  bn_momentum);
}

template <typename T>
typename EagerCtx<T>::Value EagerCtx<T>::batch_norm(Value x,
                                                    const std::string& prefix) {
  BatchNormParamsT<T> p;
  p.gamma = store(prefix + ".gamma");
  p.beta = store(prefix + ".beta");
  p.running_mean = store(prefix + ".running_mean");
  p.running_var = store(prefix + ".running_var");
  p.epsilon = bn_epsilon;
  p.momentum = bn_momentum;
  if (!mutate) {
    return wrap(batch_norm2d_infer(*x, p));
  }
  Value out = wrap(batch_norm2d_train(*x, p));
  mutate(prefix + ".running_mean") = p.running_mean;
  mutate(prefix + ".running_var") = p.running_var;
  return out;
}

template <class Ctx>
typename Ctx::Value wire_se_block(Ctx& cx, typename Ctx::Value x,
                                  const std::string& prefix) {
  auto s = cx.gap(x);
  s = cx.dense(s, cx.param(prefix + ".reduce.weight"),
               cx.param(prefix + ".reduce.bias"));
  s = cx.relu(s);
  s = cx.dense(s, cx.param(prefix + ".expand.weight"),
               cx.param(prefix + ".expand.bias"));
  s = cx.sigmoid(s);
  return cx.scale_channels(x, s);
}

template <class Ctx>
typename Ctx::Value wire_residual_block(Ctx& cx, typename Ctx::Value x,
                                        const std::string& prefix,
                                        bool se_identity) {
  auto v = cx.conv2d(x, cx.param(prefix + ".conv1.weight"), Ctx::none(), 1, 1);
  v = cx.batch_norm(v, prefix + ".bn1");
  v = cx.relu(v);
  v = cx.conv2d(v, cx.param(prefix + ".conv2.weight"), Ctx::none(), 1, 1);
  v = cx.batch_norm(v, prefix + ".bn2");
  if (!se_identity) {
    v = wire_se_block(cx, v, prefix + ".se");
  }
  auto shortcut = x;
  if (cx.has(prefix + ".shortcut.conv.weight")) {
    shortcut = cx.conv2d(x, cx.param(prefix + ".shortcut.conv.weight"),
                         Ctx::none(), 1, 0);
    shortcut = cx.batch_norm(shortcut, prefix + ".shortcut.bn");
  }
  return cx.relu(cx.add(v, shortcut));
}

template <class Ctx>
typename Ctx::Value wire_model(Ctx& cx, typename Ctx::Value x, bool zero_skips,
                               bool se_identity) {
  using Value = typename Ctx::Value;
  cx.trace("input", x);

  Value cur = x;
  std::array<Value, 4> skips{};
  for (int i = 0; i < 4; ++i) {
    const std::string prefix = "enc" + std::to_string(i + 1);
    cur = wire_residual_block(cx, cur, prefix + ".res1", se_identity);
    cur = wire_residual_block(cx, cur, prefix + ".res2", se_identity);
    skips[i] = cur;
    cx.trace(prefix + ".skip", cur);
    cur = cx.maxpool(cur);
    cx.trace(prefix + ".pool", cur);
  }
  cx.trace("bridge", cur);

  if (zero_skips) {
    for (auto& s : skips) s = cx.zeros_like(s);
  }

  std::array<Value, 4> dec{};
  for (int j = 0; j < 4; ++j) {
    const std::string prefix = "dec" + std::to_string(j + 1);
    cur = cx.conv_transpose2d(cur, cx.param(prefix + ".up.weight"),
                              cx.param(prefix + ".up.bias"), 2, 1);
    cx.trace(prefix + ".up", cur);
    cur = cx.concat({cur, skips[3 - j]});
    cx.trace(prefix + ".concat", cur);
    cur = wire_residual_block(cx, cur, prefix + ".res1", se_identity);
    cur = wire_residual_block(cx, cur, prefix + ".res2", se_identity);
    dec[j] = cur;
    cx.trace(prefix + ".out", cur);
  }

  // Head: d2 upsampled 4x, d3 upsampled 2x, d4 as-is, plus the first skip.
  Value up4 = cx.conv_transpose2d(dec[1], cx.param("head.up4.weight"),
                                  cx.param("head.up4.bias"), 4, 0);
  cx.trace("head.up4", up4);
  Value up2 = cx.conv_transpose2d(dec[2], cx.param("head.up2.weight"),
                                  cx.param("head.up2.bias"), 2, 1);
  cx.trace("head.up2", up2);
  Value cat = cx.concat({up4, up2, dec[3], skips[0]});
  cx.trace("head.concat", cat);
  Value logits = cx.conv2d(cat, cx.param("head.conv.weight"),
                           cx.param("head.conv.bias"), 1, 0);
  cx.trace("head.conv", logits);
  Value out = cx.sigmoid(logits);
  cx.trace("output", out);
  return out;
}

// Explicit instantiations for the contexts in use.
template struct TapeCtx<float>;
template struct TapeCtx<double>;
template int wire_se_block<TapeCtx<float>>(TapeCtx<float>&, int, const std::string&);
template int wire_se_block<TapeCtx<double>>(TapeCtx<double>&, int, const std::string&);
template int wire_residual_block<TapeCtx<float>>(TapeCtx<float>&, int,
                                                 const std::string&, bool);
template int wire_residual_block<TapeCtx<double>>(TapeCtx<double>&, int,
                                                  const std::string&, bool);
template int wire_model<TapeCtx<float>>(TapeCtx<float>&, int, bool, bool);
template int wire_model<TapeCtx<double>>(TapeCtx<double>&, int, bool, bool);

template struct EagerCtx<float>;
template EagerCtx<float>::Value wire_se_block<EagerCtx<float>>(
    EagerCtx<float>&, EagerCtx<float>::Value, const std::string&);
template EagerCtx<float>::Value wire_residual_block<EagerCtx<float>>(
    EagerCtx<float>&, EagerCtx<float>::Value, const std::string&, bool);
template EagerCtx<float>::Value wire_model<EagerCtx<float>>(
    EagerCtx<float>&, EagerCtx<float>::Value, bool, bool);

// ---------------------------------------------------------------------------
// Forward entry points
// ---------------------------------------------------------------------------

namespace {

void check_model_input(const ModelParams& params, const Tensor& x) {
  const int s = params.arch.input_size;
  if (x.dims.c != params.arch.in_ch || x.dims.h != s || x.dims.w != s) {
    throw ShapeError("model_forward: input " + x.dims.str() + " must be (n," +
                     std::to_string(params.arch.in_ch) + "," + std::to_string(s) +
                     "," + std::to_string(s) + ")");
  }
}

Tensor forward_eager(const ModelParams& cparams, ModelParams* mparams,
                     const Tensor& x, const ForwardOptions& opts) {
  check_model_input(cparams, x);
  EagerCtx<float> cx;
  cx.store = [&cparams](const std::string& n) -> const Tensor& {
    return cparams.at(n);
  };
  if (opts.mode == Mode::train) {
    cx.mutate = [mparams](const std::string& n) -> Tensor& {
      return mparams->at(n);
    };
  }
  cx.has_name = [&cparams](const std::string& n) { return cparams.contains(n); };
  cx.bn_epsilon = cparams.arch.bn_epsilon;
  cx.bn_momentum = cparams.arch.bn_momentum;
  cx.trace_log = opts.shape_trace;
  cx.capture = opts.stage_capture;
  auto out = wire_model(cx, EagerCtx<float>::wrap(x), opts.zero_skips,
                        opts.se_identity);
  return *out;
}

}  // namespace

Tensor model_forward(ModelParams& params, const Tensor& x,
                     const ForwardOptions& opts) {
  return forward_eager(params, &params, x, opts);
}

Tensor model_forward(const ModelParams& params, const Tensor& x,
                     const ForwardOptions& opts) {
  if (opts.mode == Mode::train) {
    throw ContractError("model_forward: train mode needs mutable params");
  }
  return forward_eager(params, nullptr, x, opts);
}

TapeModelForward model_forward_tape(Tape& tape, ModelParams& params, int x_node) {
  check_model_input(params, tape.value(x_node));
  TapeModelForward result;
  TapeCtx<float> cx;
  cx.tape = &tape;
  cx.store = [&params](const std::string& n) -> Tensor& { return params.at(n); };
  cx.has_name = [&params](const std::string& n) { return params.contains(n); };
  cx.bn_epsilon = params.arch.bn_epsilon;
  cx.bn_momentum = params.arch.bn_momentum;
  cx.leaf_log = &result.leaves;
  result.output = wire_model(cx, x_node, false, false);
  return result;
}

// ---------------------------------------------------------------------------
// Standalone blocks
// ---------------------------------------------------------------------------

Tensor se_block_forward(const Tensor& x, const SEBlockParams& p) {
  if (p.reduce_weight.dims.c != x.dims.c) {
    throw ShapeError("se_block_forward: input " + x.dims.str() + " vs reduce weight " +
                     p.reduce_weight.dims.str());
  }
  Tensor pooled = global_avg_pool(x);
  Tensor s = dense(pooled, p.reduce_weight, &p.reduce_bias);
  s = relu(s);
  s = dense(s, p.expand_weight, &p.expand_bias);
  s = sigmoid(s);
  return scale_channels(x, s);
}

Tensor residual_block_forward(const Tensor& x, ResidualBlockParams& p, Mode mode) {
  Tensor v = conv2d(x, p.conv1_weight, nullptr, 1, 1);
  v = batch_norm2d(v, p.bn1, mode == Mode::train ? BnMode::train : BnMode::infer);
  v = relu(v);
  v = conv2d(v, p.conv2_weight, nullptr, 1, 1);
  v = batch_norm2d(v, p.bn2, mode == Mode::train ? BnMode::train : BnMode::infer);
  v = se_block_forward(v, p.se);
  Tensor shortcut = x;
  if (p.shortcut_weight) {
    shortcut = conv2d(x, *p.shortcut_weight, nullptr, 1, 0);
    shortcut = batch_norm2d(shortcut, *p.shortcut_bn,
                            mode == Mode::train ? BnMode::train : BnMode::infer);
  }
  return relu(add_elementwise(v, shortcut));
}

}  // namespace polypseg
