// SPDX-License-Identifier: Apache-2.0
#include "polypseg/autograd.hpp"

#include <cmath>
#include <memory>
#include <string>

namespace polypseg {

namespace {

constexpr double kBceClampLo = 1e-7;
constexpr double kBceClampHi = 1.0 - 1e-7;

}  // namespace

template <typename T>
const typename TapeT<T>::Node& TapeT<T>::node(int id) const {
  if (id < 0 || id >= static_cast<int>(nodes_.size())) {
    throw ContractError("tape: node id " + std::to_string(id) + " out of range");
  }
  return nodes_[static_cast<std::size_t>(id)];
}

template <typename T>
typename TapeT<T>::Node& TapeT<T>::node(int id) {
  return const_cast<Node&>(static_cast<const TapeT*>(this)->node(id));
}

template <typename T>
int TapeT<T>::push(Ten value, bool needs_grad, std::function<void(TapeT&, int)> fn) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = needs_grad;
  n.backward_fn = std::move(fn);
  nodes_.push_back(std::move(n));
  return static_cast<int>(nodes_.size()) - 1;
}

template <typename T>
int TapeT<T>::leaf(Ten value, bool trainable) {
  return push(std::move(value), trainable, nullptr);
}

template <typename T>
const typename TapeT<T>::Ten& TapeT<T>::grad(int id) const {
  const Node& n = node(id);
  if (!have_grads_) throw ContractError("tape: backward() has not run");
  if (!n.requires_grad) {
    throw ContractError("tape: node " + std::to_string(id) + " has no gradient");
  }
  return n.grad;
}

template <typename T>
void TapeT<T>::accumulate(int id, const Ten& g) {
  Node& n = node(id);
  if (!n.requires_grad) return;
  if (!(n.grad.dims == g.dims)) {
    throw ContractError("tape: gradient shape " + g.dims.str() +
                        " does not match node value " + n.value.dims.str());
  }
  for (std::size_t i = 0; i < g.data.size(); ++i) n.grad.data[i] += g.data[i];
  n.reached = true;
}

template <typename T>
void TapeT<T>::backward(int loss) {
  if (nodes_.empty()) return;  // degenerate: nothing recorded, nothing to do
  Node& top = node(loss);
  if (!(top.value.dims == Dims{1, 1, 1, 1})) {
    throw ContractError("tape: backward needs a scalar loss, got " +
                        top.value.dims.str());
  }
  for (Node& n : nodes_) {
    n.reached = false;
    if (n.requires_grad) {
      n.grad = Ten::zeros(n.value.dims);
    }
  }
  have_grads_ = true;
  if (!top.requires_grad) return;  // loss does not depend on any trainable leaf
  top.grad.data[0] = T(1);
  top.reached = true;
  for (int i = loss; i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (n.reached && n.backward_fn) n.backward_fn(*this, i);
  }
}

// ---------------------------------------------------------------------------
// Recorded ops
// ---------------------------------------------------------------------------

template <typename T>
int TapeT<T>::conv2d(int x, int w, int bias, int stride, int pad) {
  const Ten* b = bias >= 0 ? &node(bias).value : nullptr;
  Ten out = polypseg::conv2d(node(x).value, node(w).value, b, stride, pad);
  bool req = node(x).requires_grad || node(w).requires_grad ||
             (bias >= 0 && node(bias).requires_grad);
  return push(std::move(out), req, [x, w, bias, stride, pad](TapeT& t, int self) {
    const Ten& g = t.node(self).grad;
    if (t.node(x).requires_grad) {
      t.accumulate(x, polypseg::conv_transpose2d(
                          g, t.node(w).value, static_cast<const Ten*>(nullptr),
                          stride, pad));
    }
    if (t.node(w).requires_grad) {
      const Dims wd = t.node(w).value.dims;
      t.accumulate(w, conv_grad_weight(g, t.node(x).value, wd.h, wd.w, stride, pad));
    }
    if (bias >= 0 && t.node(bias).requires_grad) {
      t.accumulate(bias, sum_over_batch_spatial(g));
    }
  });
}

template <typename T>
int TapeT<T>::conv_transpose2d(int x, int w, int bias, int stride, int pad) {
  const Ten* b = bias >= 0 ? &node(bias).value : nullptr;
  Ten out = polypseg::conv_transpose2d(node(x).value, node(w).value, b, stride, pad);
  bool req = node(x).requires_grad || node(w).requires_grad ||
             (bias >= 0 && node(bias).requires_grad);
  return push(std::move(out), req, [x, w, bias, stride, pad](TapeT& t, int self) {
    const Ten& g = t.node(self).grad;
    if (t.node(x).requires_grad) {
      // Adjoint of the adjoint: the forward convolution with the same weight.
      t.accumulate(x, polypseg::conv2d(g, t.node(w).value,
                                       static_cast<const Ten*>(nullptr), stride,
                                       pad));
    }
    if (t.node(w).requires_grad) {
      const Dims wd = t.node(w).value.dims;
      t.accumulate(w, conv_grad_weight(t.node(x).value, g, wd.h, wd.w, stride, pad));
    }
    if (bias >= 0 && t.node(bias).requires_grad) {
      t.accumulate(bias, sum_over_batch_spatial(g));
    }
  });
}

template <typename T>
int TapeT<T>::maxpool2d(int x) {
  auto argmax = std::make_shared<std::vector<std::int64_t>>();
  Ten out = polypseg::maxpool2d(node(x).value, argmax.get());
  return push(std::move(out), node(x).requires_grad,
              [x, argmax](TapeT& t, int self) {
                if (!t.node(x).requires_grad) return;
                const Ten& g = t.node(self).grad;
                Ten gx = Ten::zeros(t.node(x).value.dims);
                // 2x2 stride-2 windows are disjoint: one contribution each.
                for (std::size_t i = 0; i < g.data.size(); ++i) {
                  gx.data[(*argmax)[i]] += g.data[i];
                }
                t.accumulate(x, gx);
              });
}

template <typename T>
int TapeT<T>::batch_norm2d_train(int x, int gamma, int beta, Ten* running_mean,
                                 Ten* running_var, T epsilon, T momentum) {
  BatchNormParamsT<T> p;
  p.gamma = node(gamma).value;
  p.beta = node(beta).value;
  const int c = node(x).value.dims.c;
  p.running_mean = running_mean ? *running_mean : Ten::zeros({1, c, 1, 1});
  p.running_var = running_var ? *running_var : Ten::full({1, c, 1, 1}, T(1));
  p.epsilon = epsilon;
  p.momentum = momentum;

  auto saved_mean = std::make_shared<std::vector<T>>();
  auto saved_invstd = std::make_shared<std::vector<T>>();
  Ten out = polypseg::batch_norm2d_train(node(x).value, p, saved_mean.get(),
                                         saved_invstd.get());
  if (running_mean) *running_mean = p.running_mean;
  if (running_var) *running_var = p.running_var;

  bool req = node(x).requires_grad || node(gamma).requires_grad ||
             node(beta).requires_grad;
  return push(std::move(out), req,
              [x, gamma, beta, saved_mean, saved_invstd](TapeT& t, int self) {
                const Ten& g = t.node(self).grad;
                const Ten& xv = t.node(x).value;
                const Ten& gam = t.node(gamma).value;
                const int ch = xv.dims.c;
                const std::int64_t hw =
                    static_cast<std::int64_t>(xv.dims.h) * xv.dims.w;
                const std::int64_t count =
                    static_cast<std::int64_t>(xv.dims.n) * hw;

                Ten gx = Ten::zeros(xv.dims);
                Ten ggamma = Ten::zeros({1, ch, 1, 1});
                Ten gbeta = Ten::zeros({1, ch, 1, 1});
                const bool want_x = t.node(x).requires_grad;

#pragma omp parallel for schedule(static)
                for (int cc = 0; cc < ch; ++cc) {
                  const double mean = static_cast<double>((*saved_mean)[cc]);
                  const double inv = static_cast<double>((*saved_invstd)[cc]);
                  double sum_g = 0.0, sum_gx = 0.0;
                  for (int n = 0; n < xv.dims.n; ++n) {
                    const T* gp = g.plane(n, cc);
                    const T* xp = xv.plane(n, cc);
                    for (std::int64_t i = 0; i < hw; ++i) {
                      const double gv = static_cast<double>(gp[i]);
                      const double xhat =
                          (static_cast<double>(xp[i]) - mean) * inv;
                      sum_g += gv;
                      sum_gx += gv * xhat;
                    }
                  }
                  gbeta.data[cc] = static_cast<T>(sum_g);
                  ggamma.data[cc] = static_cast<T>(sum_gx);
                  if (want_x) {
                    // Full batch-statistics derivative.
                    const double scale = static_cast<double>(gam.data[cc]) * inv;
                    const double mg = sum_g / static_cast<double>(count);
                    const double mgx = sum_gx / static_cast<double>(count);
                    for (int n = 0; n < xv.dims.n; ++n) {
                      const T* gp = g.plane(n, cc);
                      const T* xp = xv.plane(n, cc);
                      T* out_p = gx.plane(n, cc);
                      for (std::int64_t i = 0; i < hw; ++i) {
                        const double xhat =
                            (static_cast<double>(xp[i]) - mean) * inv;
                        out_p[i] = static_cast<T>(
                            scale * (static_cast<double>(gp[i]) - mg - xhat * mgx));
                      }
                    }
                  }
                }
                if (want_x) t.accumulate(x, gx);
                t.accumulate(gamma, ggamma);
                t.accumulate(beta, gbeta);
              });
}

template <typename T>
int TapeT<T>::relu(int x) {
  Ten out = polypseg::relu(node(x).value);
  return push(std::move(out), node(x).requires_grad, [x](TapeT& t, int self) {
    if (!t.node(x).requires_grad) return;
    const Ten& g = t.node(self).grad;
    const Ten& xv = t.node(x).value;
    Ten gx(xv.dims);
    // Subgradient 0 at exactly 0.
    for (std::size_t i = 0; i < gx.data.size(); ++i) {
      gx.data[i] = xv.data[i] > T(0) ? g.data[i] : T(0);
    }
    t.accumulate(x, gx);
  });
}

template <typename T>
int TapeT<T>::sigmoid(int x) {
  Ten out = polypseg::sigmoid(node(x).value);
  return push(std::move(out), node(x).requires_grad, [x](TapeT& t, int self) {
    if (!t.node(x).requires_grad) return;
    const Ten& g = t.node(self).grad;
    const Ten& y = t.node(self).value;
    Ten gx(y.dims);
    for (std::size_t i = 0; i < gx.data.size(); ++i) {
      gx.data[i] = g.data[i] * y.data[i] * (T(1) - y.data[i]);
    }
    t.accumulate(x, gx);
  });
}

template <typename T>
int TapeT<T>::dense(int x, int w, int bias) {
  const Ten* b = bias >= 0 ? &node(bias).value : nullptr;
  Ten out = polypseg::dense(node(x).value, node(w).value, b);
  bool req = node(x).requires_grad || node(w).requires_grad ||
             (bias >= 0 && node(bias).requires_grad);
  return push(std::move(out), req, [x, w, bias](TapeT& t, int self) {
    const Ten& g = t.node(self).grad;
    const Ten& xv = t.node(x).value;
    const Ten& wv = t.node(w).value;
    const int in = wv.dims.c, outc = wv.dims.n;
    if (t.node(x).requires_grad) {
      Ten gx = Ten::zeros(xv.dims);
      for (int n = 0; n < xv.dims.n; ++n) {
        for (int i = 0; i < in; ++i) {
          double s = 0.0;
          for (int o = 0; o < outc; ++o) {
            s += static_cast<double>(g.at(n, o, 0, 0)) *
                 static_cast<double>(wv.data[static_cast<std::int64_t>(o) * in + i]);
          }
          gx.at(n, i, 0, 0) = static_cast<T>(s);
        }
      }
      t.accumulate(x, gx);
    }
    if (t.node(w).requires_grad) {
      Ten gw = Ten::zeros(wv.dims);
      for (int o = 0; o < outc; ++o) {
        for (int i = 0; i < in; ++i) {
          double s = 0.0;
          for (int n = 0; n < xv.dims.n; ++n) {
            s += static_cast<double>(g.at(n, o, 0, 0)) *
                 static_cast<double>(xv.at(n, i, 0, 0));
          }
          gw.data[static_cast<std::int64_t>(o) * in + i] = static_cast<T>(s);
        }
      }
      t.accumulate(w, gw);
    }
    if (bias >= 0 && t.node(bias).requires_grad) {
      t.accumulate(bias, sum_over_batch_spatial(g));
    }
  });
}

template <typename T>
int TapeT<T>::global_avg_pool(int x) {
  Ten out = polypseg::global_avg_pool(node(x).value);
  return push(std::move(out), node(x).requires_grad, [x](TapeT& t, int self) {
    if (!t.node(x).requires_grad) return;
    const Ten& g = t.node(self).grad;
    const Ten& xv = t.node(x).value;
    const std::int64_t hw = static_cast<std::int64_t>(xv.dims.h) * xv.dims.w;
    Ten gx(xv.dims);
    for (int n = 0; n < xv.dims.n; ++n) {
      for (int c = 0; c < xv.dims.c; ++c) {
        const T v = static_cast<T>(static_cast<double>(g.at(n, c, 0, 0)) /
                                   static_cast<double>(hw));
        T* p = gx.plane(n, c);
        for (std::int64_t i = 0; i < hw; ++i) p[i] = v;
      }
    }
    t.accumulate(x, gx);
  });
}

template <typename T>
int TapeT<T>::concat_channels(const std::vector<int>& xs) {
  std::vector<const Ten*> vals;
  vals.reserve(xs.size());
  bool req = false;
  for (int id : xs) {
    vals.push_back(&node(id).value);
    req = req || node(id).requires_grad;
  }
  Ten out = polypseg::concat_channels(vals);
  return push(std::move(out), req, [xs](TapeT& t, int self) {
    const Ten& g = t.node(self).grad;
    const std::int64_t hw = static_cast<std::int64_t>(g.dims.h) * g.dims.w;
    int c_off = 0;
    for (int id : xs) {
      const Dims d = t.node(id).value.dims;
      if (t.node(id).requires_grad) {
        Ten slice(d);
        for (int n = 0; n < d.n; ++n) {
          std::copy(g.plane(n, c_off), g.plane(n, c_off) + static_cast<std::int64_t>(d.c) * hw,
                    slice.plane(n, 0));
        }
        t.accumulate(id, slice);
      }
      c_off += d.c;
    }
  });
}

template <typename T>
int TapeT<T>::add(int a, int b) {
  Ten out = add_elementwise(node(a).value, node(b).value);
  bool req = node(a).requires_grad || node(b).requires_grad;
  return push(std::move(out), req, [a, b](TapeT& t, int self) {
    const Ten& g = t.node(self).grad;
    if (t.node(a).requires_grad) t.accumulate(a, g);
    if (t.node(b).requires_grad) t.accumulate(b, g);
  });
}

template <typename T>
int TapeT<T>::scale_channels(int x, int scale) {
  Ten out = polypseg::scale_channels(node(x).value, node(scale).value);
  bool req = node(x).requires_grad || node(scale).requires_grad;
  return push(std::move(out), req, [x, scale](TapeT& t, int self) {
    const Ten& g = t.node(self).grad;
    const Ten& xv = t.node(x).value;
    const Ten& sv = t.node(scale).value;
    const std::int64_t hw = static_cast<std::int64_t>(xv.dims.h) * xv.dims.w;
    if (t.node(x).requires_grad) {
      Ten gx(xv.dims);
      for (int n = 0; n < xv.dims.n; ++n) {
        for (int c = 0; c < xv.dims.c; ++c) {
          const T s = sv.at(n, c, 0, 0);
          const T* gp = g.plane(n, c);
          T* dst = gx.plane(n, c);
          for (std::int64_t i = 0; i < hw; ++i) dst[i] = gp[i] * s;
        }
      }
      t.accumulate(x, gx);
    }
    if (t.node(scale).requires_grad) {
      Ten gs = Ten::zeros(sv.dims);
      for (int n = 0; n < xv.dims.n; ++n) {
        for (int c = 0; c < xv.dims.c; ++c) {
          const T* gp = g.plane(n, c);
          const T* xp = xv.plane(n, c);
          double s = 0.0;
          for (std::int64_t i = 0; i < hw; ++i) {
            s += static_cast<double>(gp[i]) * static_cast<double>(xp[i]);
          }
          gs.at(n, c, 0, 0) = static_cast<T>(s);
        }
      }
      t.accumulate(scale, gs);
    }
  });
}

template <typename T>
int TapeT<T>::sum(int x) {
  double s = 0.0;
  for (T v : node(x).value.data) s += static_cast<double>(v);
  Ten out({1, 1, 1, 1});
  out.data[0] = static_cast<T>(s);
  return push(std::move(out), node(x).requires_grad, [x](TapeT& t, int self) {
    if (!t.node(x).requires_grad) return;
    const T g = t.node(self).grad.data[0];
    t.accumulate(x, Ten::full(t.node(x).value.dims, g));
  });
}

template <typename T>
int TapeT<T>::weighted_sum(int x, Ten weights) {
  const Ten& xv = node(x).value;
  if (!(weights.dims == xv.dims)) {
    throw ShapeError("weighted_sum: weights " + weights.dims.str() +
                     " vs input " + xv.dims.str());
  }
  double s = 0.0;
  for (std::size_t i = 0; i < weights.data.size(); ++i) {
    s += static_cast<double>(weights.data[i]) * static_cast<double>(xv.data[i]);
  }
  Ten out({1, 1, 1, 1});
  out.data[0] = static_cast<T>(s);
  auto wshared = std::make_shared<Ten>(std::move(weights));
  return push(std::move(out), node(x).requires_grad,
              [x, wshared](TapeT& t, int self) {
                if (!t.node(x).requires_grad) return;
                const T g = t.node(self).grad.data[0];
                Ten gx(wshared->dims);
                for (std::size_t i = 0; i < gx.data.size(); ++i) {
                  gx.data[i] = g * wshared->data[i];
                }
                t.accumulate(x, gx);
              });
}

template <typename T>
int TapeT<T>::dice_bce_loss(int pred, Ten target) {
  const Ten& p = node(pred).value;
  if (!(p.dims == target.dims)) {
    throw ShapeError("dice_bce_loss: pred " + p.dims.str() + " vs target " +
                     target.dims.str());
  }
  const std::int64_t total = p.size();
  double bce = 0.0, sum_py = 0.0, sum_p = 0.0, sum_y = 0.0;
  for (std::int64_t i = 0; i < total; ++i) {
    const double pv = static_cast<double>(p.data[i]);
    const double y = static_cast<double>(target.data[i]);
    const double pc = std::clamp(pv, kBceClampLo, kBceClampHi);
    bce -= y * std::log(pc) + (1.0 - y) * std::log(1.0 - pc);
    sum_py += pv * y;
    sum_p += pv;
    sum_y += y;
  }
  bce /= static_cast<double>(total);
  const double dice = 1.0 - (2.0 * sum_py + 1.0) / (sum_p + sum_y + 1.0);
  Ten out({1, 1, 1, 1});
  out.data[0] = static_cast<T>(bce + dice);

  auto tgt = std::make_shared<Ten>(std::move(target));
  return push(std::move(out), node(pred).requires_grad,
              [pred, tgt, sum_py, sum_p, sum_y, total](TapeT& t, int self) {
                if (!t.node(pred).requires_grad) return;
                const double gs =
                    static_cast<double>(t.node(self).grad.data[0]);
                const Ten& pv = t.node(pred).value;
                const double denom = sum_p + sum_y + 1.0;
                const double dice_num = 2.0 * sum_py + 1.0;
                Ten gx(pv.dims);
                for (std::int64_t i = 0; i < total; ++i) {
                  const double pd = static_cast<double>(pv.data[i]);
                  const double y = static_cast<double>(tgt->data[i]);
                  double g = 0.0;
                  if (pd > kBceClampLo && pd < kBceClampHi) {
                    g += (-y / pd + (1.0 - y) / (1.0 - pd)) /
                         static_cast<double>(total);
                  }
                  g += (dice_num - 2.0 * y * denom) / (denom * denom);
                  gx.data[i] = static_cast<T>(gs * g);
                }
                t.accumulate(pred, gx);
              });
}

template class TapeT<float>;
template class TapeT<double>;

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

void adam_step(const std::vector<Tensor*>& params,
               const std::vector<const Tensor*>& grads, AdamState& state) {
  if (params.size() != grads.size()) {
    throw ContractError("adam_step: " + std::to_string(params.size()) +
                        " params vs " + std::to_string(grads.size()) + " grads");
  }
  if (state.m.empty()) {
    state.m.reserve(params.size());
    state.v.reserve(params.size());
    for (const Tensor* p : params) {
      state.m.push_back(Tensor::zeros(p->dims));
      state.v.push_back(Tensor::zeros(p->dims));
    }
  }
  if (state.m.size() != params.size()) {
    throw ContractError("adam_step: state tracks " +
                        std::to_string(state.m.size()) + " params, got " +
                        std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!(params[i]->dims == grads[i]->dims) ||
        !(params[i]->dims == state.m[i].dims)) {
      throw ContractError("adam_step: shape mismatch at parameter " +
                          std::to_string(i) + ": param " +
                          params[i]->dims.str() + ", grad " +
                          grads[i]->dims.str());
    }
  }

  state.step_count += 1;
  const double b1 = state.config.beta1, b2 = state.config.beta2;
  const double lr = state.config.lr, eps = state.config.epsilon;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(state.step_count));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(state.step_count));

  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    const Tensor& g = *grads[i];
    Tensor& m = state.m[i];
    Tensor& v = state.v[i];
    const std::int64_t total = p.size();
#pragma omp parallel for schedule(static)
    for (std::int64_t j = 0; j < total; ++j) {
      const double gj = static_cast<double>(g.data[j]);
      const double mj = b1 * static_cast<double>(m.data[j]) + (1.0 - b1) * gj;
      const double vj = b2 * static_cast<double>(v.data[j]) + (1.0 - b2) * gj * gj;
      m.data[j] = static_cast<float>(mj);
      v.data[j] = static_cast<float>(vj);
      const double mhat = mj / bc1;
      const double vhat = vj / bc2;
      p.data[j] = static_cast<float>(static_cast<double>(p.data[j]) -
                                     lr * mhat / (std::sqrt(vhat) + eps));
    }
  }
}

// ---------------------------------------------------------------------------
// finite_diff_check
// ---------------------------------------------------------------------------

double finite_diff_check(const GraphBuilder& build, const TensorT<double>& x,
                         double eps) {
  if (!(eps > 0.0)) {
    throw ContractError("finite_diff_check: eps must be > 0");
  }

  TapeT<double> tape;
  const int x_id = tape.leaf(x, /*trainable=*/true);
  const int loss = build(tape, x_id);
  if (!(tape.value(loss).dims == Dims{1, 1, 1, 1})) {
    throw ContractError("finite_diff_check: builder must produce a scalar, got " +
                        tape.value(loss).dims.str());
  }
  tape.backward(loss);
  const TensorT<double> analytic = tape.grad(x_id);

  auto eval = [&](const TensorT<double>& probe) {
    TapeT<double> t;
    const int id = t.leaf(probe, /*trainable=*/false);
    return t.value(build(t, id)).data[0];
  };

  double max_err = 0.0;
  TensorT<double> probe = x;
  for (std::size_t i = 0; i < probe.data.size(); ++i) {
    const double keep = probe.data[i];
    probe.data[i] = keep + eps;
    const double f_plus = eval(probe);
    probe.data[i] = keep - eps;
    const double f_minus = eval(probe);
    probe.data[i] = keep;
    const double numeric = (f_plus - f_minus) / (2.0 * eps);
    const double a = analytic.data[i];
    const double err = std::abs(a - numeric) / std::max(1.0, std::abs(a));
    if (err > max_err) max_err = err;
  }
  return max_err;
}

}  // namespace polypseg
