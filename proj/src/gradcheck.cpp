// SPDX-License-Identifier: Apache-2.0
//
// Finite-difference suite behind the `gradcheck` subcommand. Fixed seeds,
// double precision throughout; ReLU inputs are kept away from the kink so
// central differences stay valid at eps ~ 1e-3.

#include "polypseg/gradcheck.hpp"

#include <cmath>
#include <map>
#include <memory>

#include "polypseg/autograd.hpp"
#include "polypseg/model.hpp"
#include "polypseg/rng.hpp"

namespace polypseg {

namespace {

using Ten64 = TensorT<double>;

Ten64 rand_tensor(Rng& rng, Dims d, double lo = -1.0, double hi = 1.0) {
  Ten64 t(d);
  for (auto& v : t.data) v = rng.next_uniform(lo, hi);
  return t;
}

// Uniform in [-1,-margin] U [margin,1]: keeps ReLU kinks out of reach of the
// finite-difference step.
Ten64 rand_tensor_away_from_zero(Rng& rng, Dims d, double margin = 0.05) {
  Ten64 t(d);
  for (auto& v : t.data) {
    const double u = rng.next_uniform(margin, 1.0);
    v = rng.next_u64() % 2 == 0 ? u : -u;
  }
  return t;
}

Ten64 rand_binary(Rng& rng, Dims d) {
  Ten64 t(d);
  for (auto& v : t.data) v = rng.next_u64() % 2 == 0 ? 0.0 : 1.0;
  return t;
}

struct Suite {
  double eps;
  GradCheckReport report;

  void run(const std::string& name, const GraphBuilder& build, const Ten64& x) {
    GradCheckCase c;
    c.name = name;
    c.max_rel_err = finite_diff_check(build, x, eps);
    c.passed = c.max_rel_err <= report.tol;
    report.cases.push_back(std::move(c));
  }
};

// Graph over a named parameter map where one tensor (`probe`) is replaced by
// the checked leaf; used for the composed-block cases.
GraphBuilder block_builder(
    std::shared_ptr<std::map<std::string, Ten64>> params,
    const std::string& probe, const Ten64& input, const Ten64& cotangent,
    const std::function<int(TapeCtx<double>&, int)>& wire) {
  return [params, probe, input, cotangent, wire](TapeT<double>& t, int x_id) {
    // Copy the store per evaluation so BN running-stat updates cannot leak
    // between finite-difference probes.
    auto store = std::make_shared<std::map<std::string, Ten64>>(*params);
    TapeCtx<double> cx;
    cx.tape = &t;
    cx.store = [store](const std::string& n) -> Ten64& {
      auto it = store->find(n);
      if (it == store->end()) throw ContractError("gradcheck: missing param " + n);
      return it->second;
    };
    cx.has_name = [store](const std::string& n) { return store->count(n) != 0; };
    int input_id;
    if (probe == "input") {
      input_id = x_id;
    } else {
      cx.leaf_cache[probe] = x_id;  // the probed parameter is the leaf
      input_id = t.leaf(input, false);
    }
    const int y = wire(cx, input_id);
    return t.weighted_sum(y, cotangent);
  };
}

// Central differences at a ReLU kink mis-estimate by O(slope) regardless of
// eps, so the composed-block cases are built to keep every internal
// pre-activation far from zero: batch-norm betas sit around +1.5 with small
// gammas, and the SE bottleneck is positively biased. The fixed seed is
// verified to keep all margins clear of the 1e-3 probe step.
std::map<std::string, Ten64> make_residual_params(Rng& rng, int cin, int cout,
                                                  int se_ratio) {
  std::map<std::string, Ten64> p;
  const int hidden = std::max(1, cout / se_ratio);
  p["blk.conv1.weight"] = rand_tensor(rng, {cout, cin, 3, 3}, -0.3, 0.3);
  p["blk.bn1.gamma"] = rand_tensor(rng, {1, cout, 1, 1}, 0.25, 0.45);
  p["blk.bn1.beta"] = rand_tensor(rng, {1, cout, 1, 1}, 1.4, 2.0);
  p["blk.bn1.running_mean"] = Ten64::zeros({1, cout, 1, 1});
  p["blk.bn1.running_var"] = Ten64::full({1, cout, 1, 1}, 1.0);
  p["blk.conv2.weight"] = rand_tensor(rng, {cout, cout, 3, 3}, -0.3, 0.3);
  p["blk.bn2.gamma"] = rand_tensor(rng, {1, cout, 1, 1}, 0.25, 0.45);
  p["blk.bn2.beta"] = rand_tensor(rng, {1, cout, 1, 1}, 1.4, 2.0);
  p["blk.bn2.running_mean"] = Ten64::zeros({1, cout, 1, 1});
  p["blk.bn2.running_var"] = Ten64::full({1, cout, 1, 1}, 1.0);
  p["blk.se.reduce.weight"] = rand_tensor(rng, {hidden, cout, 1, 1}, 0.1, 0.3);
  p["blk.se.reduce.bias"] = rand_tensor(rng, {1, hidden, 1, 1}, 0.5, 1.0);
  p["blk.se.expand.weight"] = rand_tensor(rng, {cout, hidden, 1, 1}, -0.5, 0.5);
  p["blk.se.expand.bias"] = rand_tensor(rng, {1, cout, 1, 1}, -0.2, 0.2);
  if (cin != cout) {
    // With only cin 1x1 taps, weights this large keep the following batch
    // norm's channel variance near 1; small variances blow up the curvature
    // and with it the O(eps^2) truncation error of the central difference.
    p["blk.shortcut.conv.weight"] = rand_tensor(rng, {cout, cin, 1, 1}, -1.5, 1.5);
    p["blk.shortcut.bn.gamma"] = rand_tensor(rng, {1, cout, 1, 1}, 0.25, 0.45);
    p["blk.shortcut.bn.beta"] = rand_tensor(rng, {1, cout, 1, 1}, 1.4, 2.0);
    p["blk.shortcut.bn.running_mean"] = Ten64::zeros({1, cout, 1, 1});
    p["blk.shortcut.bn.running_var"] = Ten64::full({1, cout, 1, 1}, 1.0);
  }
  return p;
}

}  // namespace

GradCheckReport run_gradcheck(double eps, double tol) {
  Suite s;
  s.eps = eps;
  s.report.eps = eps;
  s.report.tol = tol;

  Rng rng(20240811);

  // --- conv2d ---
  {
    const Ten64 x = rand_tensor(rng, {2, 3, 6, 6});
    const Ten64 w = rand_tensor(rng, {4, 3, 3, 3}, -0.5, 0.5);
    const Ten64 b = rand_tensor(rng, {1, 4, 1, 1}, -0.2, 0.2);
    const Ten64 cot = rand_tensor(rng, {2, 4, 6, 6});
    s.run("conv2d/input",
          [w, b, cot](TapeT<double>& t, int id) {
            return t.weighted_sum(
                t.conv2d(id, t.leaf(w, false), t.leaf(b, false), 1, 1), cot);
          },
          x);
    s.run("conv2d/weight",
          [x, b, cot](TapeT<double>& t, int id) {
            return t.weighted_sum(
                t.conv2d(t.leaf(x, false), id, t.leaf(b, false), 1, 1), cot);
          },
          w);
    s.run("conv2d/bias",
          [x, w, cot](TapeT<double>& t, int id) {
            return t.weighted_sum(
                t.conv2d(t.leaf(x, false), t.leaf(w, false), id, 1, 1), cot);
          },
          b);
  }
  {
    // Strided, padded, rectangular kernel: 9 + 2*2 - 5 = 8 and 9 + 2*2 - 3
    // = 10 both divide stride 2, giving a (2,3,5,6) output.
    const Ten64 x = rand_tensor(rng, {2, 2, 9, 9});
    const Ten64 w = rand_tensor(rng, {3, 2, 5, 3}, -0.5, 0.5);
    const Ten64 cot = rand_tensor(rng, {2, 3, 5, 6});
    s.run("conv2d/input_stride2",
          [x, w, cot](TapeT<double>& t, int id) {
            (void)x;
            return t.weighted_sum(t.conv2d(id, t.leaf(w, false), -1, 2, 2), cot);
          },
          x);
    s.run("conv2d/weight_stride2",
          [x, w, cot](TapeT<double>& t, int id) {
            return t.weighted_sum(t.conv2d(t.leaf(x, false), id, -1, 2, 2), cot);
          },
          w);
  }

  // --- conv_transpose2d ---
  {
    const Ten64 x = rand_tensor(rng, {2, 3, 4, 4});
    const Ten64 w = rand_tensor(rng, {3, 2, 4, 4}, -0.5, 0.5);  // (ci, co, kh, kw)
    const Ten64 b = rand_tensor(rng, {1, 2, 1, 1}, -0.2, 0.2);
    const Ten64 cot = rand_tensor(rng, {2, 2, 8, 8});
    s.run("conv_transpose2d/input",
          [w, b, cot](TapeT<double>& t, int id) {
            return t.weighted_sum(
                t.conv_transpose2d(id, t.leaf(w, false), t.leaf(b, false), 2, 1),
                cot);
          },
          x);
    s.run("conv_transpose2d/weight",
          [x, b, cot](TapeT<double>& t, int id) {
            return t.weighted_sum(
                t.conv_transpose2d(t.leaf(x, false), id, t.leaf(b, false), 2, 1),
                cot);
          },
          w);
    s.run("conv_transpose2d/bias",
          [x, w, cot](TapeT<double>& t, int id) {
            return t.weighted_sum(
                t.conv_transpose2d(t.leaf(x, false), t.leaf(w, false), id, 2, 1),
                cot);
          },
          b);
  }

  // --- maxpool2d ---
  {
    // All values separated by 0.025 (25x the probe step), so no window
    // ordering can flip during a finite-difference evaluation.
    Ten64 x(Dims{2, 3, 4, 4});
    std::vector<int> ranks(x.data.size());
    for (std::size_t i = 0; i < ranks.size(); ++i) ranks[i] = static_cast<int>(i);
    rng.shuffle(ranks);
    for (std::size_t i = 0; i < ranks.size(); ++i) {
      x.data[i] = -1.2 + 0.025 * ranks[i];
    }
    const Ten64 cot = rand_tensor(rng, {2, 3, 2, 2});
    s.run("maxpool2d/input",
          [cot](TapeT<double>& t, int id) {
            return t.weighted_sum(t.maxpool2d(id), cot);
          },
          x);
  }

  // --- batch_norm2d train mode ---
  {
    const Ten64 x = rand_tensor(rng, {2, 3, 4, 4});
    const Ten64 gamma = rand_tensor(rng, {1, 3, 1, 1}, 0.5, 1.5);
    const Ten64 beta = rand_tensor(rng, {1, 3, 1, 1}, -0.3, 0.3);
    const Ten64 cot = rand_tensor(rng, {2, 3, 4, 4});
    auto bn = [](TapeT<double>& t, int xid, int gid, int bid) {
      return t.batch_norm2d_train(xid, gid, bid, nullptr, nullptr, 1e-5, 0.9);
    };
    s.run("batch_norm2d/input",
          [gamma, beta, cot, bn](TapeT<double>& t, int id) {
            return t.weighted_sum(
                bn(t, id, t.leaf(gamma, false), t.leaf(beta, false)), cot);
          },
          x);
    s.run("batch_norm2d/gamma",
          [x, beta, cot, bn](TapeT<double>& t, int id) {
            return t.weighted_sum(bn(t, t.leaf(x, false), id, t.leaf(beta, false)),
                                  cot);
          },
          gamma);
    s.run("batch_norm2d/beta",
          [x, gamma, cot, bn](TapeT<double>& t, int id) {
            return t.weighted_sum(bn(t, t.leaf(x, false), t.leaf(gamma, false), id),
                                  cot);
          },
          beta);
  }

  // --- activations ---
  {
    const Ten64 x = rand_tensor_away_from_zero(rng, {2, 4, 4, 4});
    const Ten64 cot = rand_tensor(rng, {2, 4, 4, 4});
    s.run("relu/input",
          [cot](TapeT<double>& t, int id) {
            return t.weighted_sum(t.relu(id), cot);
          },
          x);
  }
  {
    const Ten64 x = rand_tensor(rng, {2, 4, 4, 4}, -3.0, 3.0);
    const Ten64 cot = rand_tensor(rng, {2, 4, 4, 4});
    s.run("sigmoid/input",
          [cot](TapeT<double>& t, int id) {
            return t.weighted_sum(t.sigmoid(id), cot);
          },
          x);
  }

  // --- dense ---
  {
    const Ten64 x = rand_tensor(rng, {2, 6, 1, 1});
    const Ten64 w = rand_tensor(rng, {4, 6, 1, 1}, -0.5, 0.5);
    const Ten64 b = rand_tensor(rng, {1, 4, 1, 1}, -0.2, 0.2);
    const Ten64 cot = rand_tensor(rng, {2, 4, 1, 1});
    s.run("dense/input",
          [w, b, cot](TapeT<double>& t, int id) {
            return t.weighted_sum(t.dense(id, t.leaf(w, false), t.leaf(b, false)),
                                  cot);
          },
          x);
    s.run("dense/weight",
          [x, b, cot](TapeT<double>& t, int id) {
            return t.weighted_sum(t.dense(t.leaf(x, false), id, t.leaf(b, false)),
                                  cot);
          },
          w);
    s.run("dense/bias",
          [x, w, cot](TapeT<double>& t, int id) {
            return t.weighted_sum(t.dense(t.leaf(x, false), t.leaf(w, false), id),
                                  cot);
          },
          b);
  }

  // --- global_avg_pool ---
  {
    const Ten64 x = rand_tensor(rng, {2, 3, 4, 4});
    const Ten64 cot = rand_tensor(rng, {2, 3, 1, 1});
    s.run("global_avg_pool/input",
          [cot](TapeT<double>& t, int id) {
            return t.weighted_sum(t.global_avg_pool(id), cot);
          },
          x);
  }

  // --- concat ---
  {
    const Ten64 a = rand_tensor(rng, {2, 2, 4, 4});
    const Ten64 b = rand_tensor(rng, {2, 3, 4, 4});
    const Ten64 cot = rand_tensor(rng, {2, 5, 4, 4});
    s.run("concat_channels/first",
          [b, cot](TapeT<double>& t, int id) {
            return t.weighted_sum(t.concat_channels({id, t.leaf(b, false)}), cot);
          },
          a);
    s.run("concat_channels/second",
          [a, cot](TapeT<double>& t, int id) {
            return t.weighted_sum(t.concat_channels({t.leaf(a, false), id}), cot);
          },
          b);
  }

  // --- add ---
  {
    const Ten64 a = rand_tensor(rng, {2, 3, 4, 4});
    const Ten64 b = rand_tensor(rng, {2, 3, 4, 4});
    const Ten64 cot = rand_tensor(rng, {2, 3, 4, 4});
    s.run("add_elementwise/input",
          [b, cot](TapeT<double>& t, int id) {
            return t.weighted_sum(t.add(id, t.leaf(b, false)), cot);
          },
          a);
  }

  // --- scale_channels ---
  {
    const Ten64 x = rand_tensor(rng, {2, 3, 4, 4});
    const Ten64 sc = rand_tensor(rng, {2, 3, 1, 1}, 0.2, 1.0);
    const Ten64 cot = rand_tensor(rng, {2, 3, 4, 4});
    s.run("scale_channels/input",
          [sc, cot](TapeT<double>& t, int id) {
            return t.weighted_sum(t.scale_channels(id, t.leaf(sc, false)), cot);
          },
          x);
    s.run("scale_channels/scale",
          [x, cot](TapeT<double>& t, int id) {
            return t.weighted_sum(t.scale_channels(t.leaf(x, false), id), cot);
          },
          sc);
  }

  // --- composed SE block ---
  {
    const int c = 6;
    auto params = std::make_shared<std::map<std::string, Ten64>>();
    const int hidden = std::max(1, c / 4);
    // Positive weights/bias on the reduce layer keep the bottleneck ReLU
    // clear of its kink for every probe.
    (*params)["se.reduce.weight"] = rand_tensor(rng, {hidden, c, 1, 1}, 0.1, 0.4);
    (*params)["se.reduce.bias"] = rand_tensor(rng, {1, hidden, 1, 1}, 0.5, 1.0);
    (*params)["se.expand.weight"] = rand_tensor(rng, {c, hidden, 1, 1}, -0.5, 0.5);
    (*params)["se.expand.bias"] = rand_tensor(rng, {1, c, 1, 1}, -0.2, 0.2);
    const Ten64 input = rand_tensor(rng, {2, c, 4, 4}, 0.2, 1.2);
    const Ten64 cot = rand_tensor(rng, {2, c, 4, 4});
    auto wire = [](TapeCtx<double>& cx, int x) {
      return wire_se_block(cx, x, "se");
    };
    for (const std::string probe :
         {std::string("input"), std::string("se.reduce.weight"),
          std::string("se.reduce.bias"), std::string("se.expand.weight"),
          std::string("se.expand.bias")}) {
      const Ten64& target = probe == "input" ? input : params->at(probe);
      s.run("se_block/" + probe,
            block_builder(params, probe, input, cot, wire), target);
    }
  }

  // --- composed residual block with projection shortcut ---
  {
    const int cin = 3, cout = 8;
    auto params = std::make_shared<std::map<std::string, Ten64>>(
        make_residual_params(rng, cin, cout, 8));
    const Ten64 input = rand_tensor_away_from_zero(rng, {2, cin, 8, 8});
    const Ten64 cot = rand_tensor(rng, {2, cout, 8, 8});
    auto wire = [](TapeCtx<double>& cx, int x) {
      return wire_residual_block(cx, x, "blk", false);
    };
    for (const auto& entry : *params) {
      if (!ModelParams::is_trainable_name(entry.first)) continue;
      s.run("residual_block/" + entry.first,
            block_builder(params, entry.first, input, cot, wire),
            entry.second);
    }
    s.run("residual_block/input",
          block_builder(params, "input", input, cot, wire), input);
  }

  // --- dice_bce loss ---
  {
    // Through the sigmoid head, the way it is used in training.
    const Ten64 z = rand_tensor(rng, {2, 1, 4, 4}, -2.0, 2.0);
    Rng trng(7);
    const Ten64 target = rand_binary(trng, {2, 1, 4, 4});
    s.run("dice_bce_loss/logits",
          [target](TapeT<double>& t, int id) {
            return t.dice_bce_loss(t.sigmoid(id), target);
          },
          z);
    const Ten64 p = rand_tensor(rng, {2, 1, 4, 4}, 0.1, 0.9);
    s.run("dice_bce_loss/probabilities",
          [target](TapeT<double>& t, int id) {
            return t.dice_bce_loss(id, target);
          },
          p);
  }

  s.report.all_passed = true;
  for (const auto& c : s.report.cases) {
    s.report.all_passed = s.report.all_passed && c.passed;
  }
  return s.report;
}

}  // namespace polypseg
