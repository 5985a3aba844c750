// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>

#include "polypseg/kernels.hpp"
#include "polypseg/rng.hpp"
#include "polypseg/threads.hpp"
#include "oracles.hpp"

using namespace polypseg;

TEST_CASE("tensor indexing round-trips") {
  Tensor t({2, 3, 4, 5});
  CHECK(t.size() == 120);
  int64_t flat = 0;
  for (int n = 0; n < 2; ++n)
    for (int c = 0; c < 3; ++c)
      for (int h = 0; h < 4; ++h)
        for (int w = 0; w < 5; ++w) {
          CHECK(t.index(n, c, h, w) == flat);
          ++flat;
        }
  CHECK_THROWS_AS(Tensor({0, 1, 1, 1}), ShapeError);
  CHECK_THROWS_AS(Tensor({1, 1, 2, 2}, {1.0f, 2.0f}), ShapeError);
}

TEST_CASE("conv2d: 3x3 ones kernel over 1..9, pad 1") {
  Tensor x({1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  Tensor w = Tensor::full({1, 1, 3, 3}, 1.0f);
  Tensor out = conv2d(x, w, nullptr, 1, 1);
  CHECK(out.dims == Dims{1, 1, 3, 3});
  // Independent direct-summation oracle over all taps.
  auto ref = oracle::conv2d_naive(x, w, nullptr, 1, 1);
  CHECK(oracle::max_abs_diff(out, ref) < 1e-6);
  CHECK(out.at(0, 0, 1, 1) == doctest::Approx(45.0f));  // center: sum of 1..9
}

TEST_CASE("conv2d: identity 1x1 kernel") {
  Rng rng(1);
  Tensor x = oracle::random_tensor(rng, {2, 1, 5, 7});
  Tensor w = Tensor::full({1, 1, 1, 1}, 1.0f);
  Tensor out = conv2d(x, w, nullptr, 1, 0);
  CHECK(out.dims == x.dims);
  CHECK(out.data == x.data);
}

TEST_CASE("conv2d: zero weights give zero output of the stated shape") {
  Rng rng(2);
  Tensor x = oracle::random_tensor(rng, {1, 3, 8, 8});
  Tensor w = Tensor::zeros({4, 3, 3, 3});
  Tensor b = Tensor::zeros({1, 4, 1, 1});
  Tensor out = conv2d(x, w, &b, 1, 1);
  CHECK(out.dims == Dims{1, 4, 8, 8});
  for (float v : out.data) CHECK(v == 0.0f);
}

TEST_CASE("conv2d: shape errors") {
  Tensor x({1, 3, 8, 8});
  Tensor w({4, 2, 3, 3});
  CHECK_THROWS_AS(conv2d(x, w, nullptr, 1, 1), ShapeError);  // channel mismatch
  Tensor w2({4, 3, 3, 3});
  CHECK_THROWS_AS(conv2d(x, w2, nullptr, 2, 0), ShapeError);  // 5/2 not integral
  Tensor bad_bias({1, 3, 1, 1});
  CHECK_THROWS_AS(conv2d(x, w2, &bad_bias, 1, 1), ShapeError);
}

TEST_CASE("conv2d: fuzz against the naive direct oracle") {
  Rng rng(42);
  int cases = 0;
  for (int iter = 0; iter < 60; ++iter) {
    const int n = 1 + static_cast<int>(rng.next_below(2));
    const int ic = 1 + static_cast<int>(rng.next_below(4));
    const int oc = 1 + static_cast<int>(rng.next_below(4));
    const int kh = 1 + static_cast<int>(rng.next_below(5));
    const int kw = 1 + static_cast<int>(rng.next_below(5));
    const int stride = 1 + static_cast<int>(rng.next_below(2));
    const int pad = static_cast<int>(rng.next_below(3));
    // Draw a spatial size that divides exactly.
    const int oh = 1 + static_cast<int>(rng.next_below(6));
    const int ow = 1 + static_cast<int>(rng.next_below(6));
    const int h = (oh - 1) * stride + kh - 2 * pad;
    const int w = (ow - 1) * stride + kw - 2 * pad;
    if (h < 1 || w < 1 || h > 16 || w > 16) continue;
    Tensor x = oracle::random_tensor(rng, {n, ic, h, w});
    Tensor wt = oracle::random_tensor(rng, {oc, ic, kh, kw});
    Tensor b = oracle::random_tensor(rng, {1, oc, 1, 1});
    Tensor out = conv2d(x, wt, &b, stride, pad);
    auto ref = oracle::conv2d_naive(x, wt, &b, stride, pad);
    CHECK(oracle::max_abs_diff(out, ref) < 1e-5);
    ++cases;
  }
  CHECK(cases >= 30);
}

TEST_CASE("conv2d: linearity without bias") {
  Rng rng(7);
  Tensor x = oracle::random_tensor(rng, {1, 3, 8, 8}, -10.0, 10.0);
  Tensor y = oracle::random_tensor(rng, {1, 3, 8, 8}, -10.0, 10.0);
  Tensor w = oracle::random_tensor(rng, {4, 3, 3, 3});
  const float alpha = 3.25f;

  Tensor ax(x.dims);
  Tensor xy(x.dims);
  for (int64_t i = 0; i < x.size(); ++i) {
    ax.data[i] = alpha * x.data[i];
    xy.data[i] = x.data[i] + y.data[i];
  }
  Tensor cx = conv2d(x, w, nullptr, 1, 1);
  Tensor cax = conv2d(ax, w, nullptr, 1, 1);
  Tensor cy = conv2d(y, w, nullptr, 1, 1);
  Tensor cxy = conv2d(xy, w, nullptr, 1, 1);
  for (int64_t i = 0; i < cx.size(); ++i) {
    CHECK(cax.data[i] == doctest::Approx(alpha * cx.data[i]).epsilon(1e-5));
    CHECK(cxy.data[i] ==
          doctest::Approx(cx.data[i] + cy.data[i]).epsilon(1e-5));
  }
}

TEST_CASE("conv_transpose2d: single input element scatters the kernel") {
  const float v = 2.75f;
  Tensor x = Tensor::full({1, 1, 1, 1}, v);
  Tensor w = Tensor::full({1, 1, 4, 4}, 1.0f);
  Tensor out = conv_transpose2d(x, w, nullptr, 2, 1);
  CHECK(out.dims == Dims{1, 1, 2, 2});
  auto ref = oracle::conv_transpose2d_naive(x, w, nullptr, 2, 1);
  CHECK(oracle::max_abs_diff(out, ref) < 1e-6);
  for (float o : out.data) CHECK(o == doctest::Approx(v));
}

TEST_CASE("conv_transpose2d: 4x4 stride-4 upscales 64ch 128 -> 512") {
  Tensor x({1, 64, 128, 128});
  Tensor w({64, 64, 4, 4});
  Tensor out = conv_transpose2d(x, w, nullptr, 4, 0);
  CHECK(out.dims == Dims{1, 64, 512, 512});
  for (float v : out.data) {
    if (v != 0.0f) {  // zero input -> zero output
      CHECK(v == 0.0f);
      break;
    }
  }
}

TEST_CASE("conv_transpose2d: fuzz against the zero-stuffed scatter oracle") {
  Rng rng(43);
  for (int iter = 0; iter < 40; ++iter) {
    const int n = 1 + static_cast<int>(rng.next_below(2));
    const int ci = 1 + static_cast<int>(rng.next_below(3));
    const int co = 1 + static_cast<int>(rng.next_below(3));
    const int k = 1 + static_cast<int>(rng.next_below(5));
    const int stride = 1 + static_cast<int>(rng.next_below(2));
    const int pad = static_cast<int>(rng.next_below(3));
    const int h = 1 + static_cast<int>(rng.next_below(7));
    const int w = 1 + static_cast<int>(rng.next_below(7));
    if ((h - 1) * stride - 2 * pad + k < 1) continue;
    if ((w - 1) * stride - 2 * pad + k < 1) continue;
    Tensor x = oracle::random_tensor(rng, {n, ci, h, w});
    Tensor wt = oracle::random_tensor(rng, {ci, co, k, k});
    Tensor b = oracle::random_tensor(rng, {1, co, 1, 1});
    Tensor out = conv_transpose2d(x, wt, &b, stride, pad);
    auto ref = oracle::conv_transpose2d_naive(x, wt, &b, stride, pad);
    CHECK(oracle::max_abs_diff(out, ref) < 1e-5);
  }
}

TEST_CASE("conv adjoint identity: <conv(y), x> == <y, convT(x)>") {
  Rng rng(44);
  for (int iter = 0; iter < 20; ++iter) {
    const int stride = 1 + static_cast<int>(rng.next_below(2));
    const int pad = static_cast<int>(rng.next_below(2));
    const int k = 2 + static_cast<int>(rng.next_below(3));
    const int oh = 2 + static_cast<int>(rng.next_below(4));
    const int h = (oh - 1) * stride + k - 2 * pad;
    if (h < 1) continue;
    const int oc = 1 + static_cast<int>(rng.next_below(3));
    const int ic = 1 + static_cast<int>(rng.next_below(3));
    Tensor y = oracle::random_tensor(rng, {1, ic, h, h});
    Tensor w = oracle::random_tensor(rng, {oc, ic, k, k});
    Tensor x = oracle::random_tensor(rng, {1, oc, oh, oh});
    Tensor cy = conv2d(y, w, nullptr, stride, pad);
    Tensor ctx = conv_transpose2d(x, w, nullptr, stride, pad);
    const double lhs = oracle::dot(cy, x);
    const double rhs = oracle::dot(y, ctx);
    CHECK(std::abs(lhs - rhs) <=
          1e-4 * std::max(1.0, std::max(std::abs(lhs), std::abs(rhs))));
  }
}

TEST_CASE("conv_transpose2d: non-positive output size is rejected") {
  Tensor x({1, 1, 1, 1});
  Tensor w({1, 1, 2, 2});
  CHECK_THROWS_AS(conv_transpose2d(x, w, nullptr, 1, 1), ShapeError);
}

TEST_CASE("maxpool2d basics") {
  Tensor x({1, 1, 2, 2}, {1, 2, 3, 4});
  Tensor out = maxpool2d(x);
  CHECK(out.dims == Dims{1, 1, 1, 1});
  CHECK(out.data[0] == 4.0f);

  Tensor c = Tensor::full({2, 3, 8, 8}, 5.5f);
  Tensor pc = maxpool2d(c);
  CHECK(pc.dims == Dims{2, 3, 4, 4});
  for (float v : pc.data) CHECK(v == 5.5f);

  Tensor big({1, 1, 512, 512});
  CHECK(maxpool2d(big).dims == Dims{1, 1, 256, 256});

  Tensor odd({1, 1, 3, 4});
  CHECK_THROWS_AS(maxpool2d(odd), ShapeError);
}

TEST_CASE("maxpool2d: every output element is the max of its window") {
  Rng rng(45);
  for (int iter = 0; iter < 20; ++iter) {
    const int h = 2 * (1 + static_cast<int>(rng.next_below(5)));
    const int w = 2 * (1 + static_cast<int>(rng.next_below(5)));
    Tensor x = oracle::random_tensor(rng, {2, 3, h, w});
    Tensor out = maxpool2d(x);
    for (int n = 0; n < 2; ++n)
      for (int c = 0; c < 3; ++c)
        for (int oy = 0; oy < h / 2; ++oy)
          for (int ox = 0; ox < w / 2; ++ox) {
            const float m = std::max(
                std::max(x.at(n, c, 2 * oy, 2 * ox), x.at(n, c, 2 * oy, 2 * ox + 1)),
                std::max(x.at(n, c, 2 * oy + 1, 2 * ox),
                         x.at(n, c, 2 * oy + 1, 2 * ox + 1)));
            CHECK(out.at(n, c, oy, ox) == m);
          }
  }
}

TEST_CASE("batch_norm2d infer: identity and zero-scale parameters") {
  Rng rng(46);
  Tensor x = oracle::random_tensor(rng, {2, 3, 4, 4});
  BatchNormParams p = BatchNormParams::identity(3, 0.0f);
  Tensor out = batch_norm2d_infer(x, p);
  for (int64_t i = 0; i < x.size(); ++i) {
    CHECK(out.data[i] == doctest::Approx(x.data[i]));
  }

  BatchNormParams pz = BatchNormParams::identity(3);
  std::fill(pz.gamma.data.begin(), pz.gamma.data.end(), 0.0f);
  std::fill(pz.beta.data.begin(), pz.beta.data.end(), 1.25f);
  Tensor outz = batch_norm2d_infer(x, pz);
  for (float v : outz.data) CHECK(v == doctest::Approx(1.25f));

  BatchNormParams wrong = BatchNormParams::identity(2);
  CHECK_THROWS_AS(batch_norm2d_infer(x, wrong), ShapeError);
}

TEST_CASE("batch_norm2d train: {1,2,3} matches the scalar oracle") {
  Tensor x({1, 1, 1, 3}, {1, 2, 3});
  BatchNormParams p = BatchNormParams::identity(1, 1e-5f, 0.9f);
  std::vector<float> mean, invstd;
  Tensor out = batch_norm2d_train(x, p, &mean, &invstd);

  // Independent double-precision computation.
  const double m = 2.0;
  const double var = ((1 - m) * (1 - m) + 0 + (3 - m) * (3 - m)) / 3.0;  // 2/3
  const double inv = 1.0 / std::sqrt(var + 1e-5);
  CHECK(mean[0] == doctest::Approx(m).epsilon(1e-5));
  for (int i = 0; i < 3; ++i) {
    CHECK(out.data[i] ==
          doctest::Approx(((double)x.data[i] - m) * inv).epsilon(1e-5));
  }
  // running <- momentum*running + (1-momentum)*batch
  CHECK(p.running_mean.data[0] == doctest::Approx(0.9 * 0.0 + 0.1 * m));
  CHECK(p.running_var.data[0] == doctest::Approx(0.9 * 1.0 + 0.1 * var));
}

TEST_CASE("batch_norm2d train: normalized output has mean 0, variance 1") {
  Rng rng(47);
  Tensor x = oracle::random_tensor(rng, {2, 4, 6, 6}, -3.0, 5.0);
  BatchNormParams p = BatchNormParams::identity(4);
  Tensor out = batch_norm2d_train(x, p);
  const int64_t count = 2 * 6 * 6;
  for (int c = 0; c < 4; ++c) {
    double sum = 0.0, sumsq = 0.0;
    for (int n = 0; n < 2; ++n)
      for (int i = 0; i < 36; ++i) {
        const double v = out.plane(n, c)[i];
        sum += v;
        sumsq += v * v;
      }
    const double mu = sum / count;
    const double var = sumsq / count - mu * mu;
    CHECK(std::abs(mu) <= 1e-5);
    CHECK(std::abs(var - 1.0) <= 1e-4);
  }
}

TEST_CASE("activations") {
  Tensor x({1, 1, 1, 5}, {0.0f, -3.2f, 5.0f, 100.0f, -100.0f});
  Tensor s = sigmoid(x);
  CHECK(s.data[0] == doctest::Approx(0.5));
  Tensor r = relu(x);
  CHECK(r.data[1] == 0.0f);
  CHECK(r.data[2] == 5.0f);
  for (float v : s.data) {
    CHECK(v > 0.0f);
    CHECK(v < 1.0f);
    CHECK(std::isfinite(v));
  }
  CHECK(apply_activation(x, Activation::relu).data == r.data);
  CHECK(apply_activation(x, Activation::sigmoid).data == s.data);
}

TEST_CASE("global_avg_pool") {
  Tensor k = Tensor::full({2, 3, 4, 4}, 7.25f);
  Tensor out = global_avg_pool(k);
  CHECK(out.dims == Dims{2, 3, 1, 1});
  for (float v : out.data) CHECK(v == doctest::Approx(7.25f));

  Tensor x({1, 1, 2, 2}, {1, 2, 3, 4});
  CHECK(global_avg_pool(x).data[0] == doctest::Approx(2.5f));

  Tensor z = Tensor::zeros({1, 2, 3, 3});
  for (float v : global_avg_pool(z).data) CHECK(v == 0.0f);
}

TEST_CASE("dense") {
  // identity weight
  Tensor x({1, 2, 1, 1}, {3.0f, -1.5f});
  Tensor eye({2, 2, 1, 1}, {1, 0, 0, 1});
  Tensor zb = Tensor::zeros({1, 2, 1, 1});
  CHECK(dense(x, eye, &zb).data == x.data);

  // zero weight, bias b
  Tensor zw = Tensor::zeros({2, 2, 1, 1});
  Tensor b({1, 2, 1, 1}, {0.5f, -0.5f});
  Tensor out = dense(x, zw, &b);
  CHECK(out.data[0] == 0.5f);
  CHECK(out.data[1] == -0.5f);

  // [[1,2],[3,4]] * [1,1] = [3,7]
  Tensor w({2, 2, 1, 1}, {1, 2, 3, 4});
  Tensor ones({1, 2, 1, 1}, {1, 1});
  Tensor mv = dense(ones, w, nullptr);
  CHECK(mv.data[0] == doctest::Approx(3.0f));
  CHECK(mv.data[1] == doctest::Approx(7.0f));

  Tensor wrong({2, 3, 1, 1});
  CHECK_THROWS_AS(dense(x, wrong, nullptr), ShapeError);
}

TEST_CASE("concat_channels") {
  Rng rng(48);
  Tensor a = oracle::random_tensor(rng, {1, 2, 4, 4});
  Tensor b = oracle::random_tensor(rng, {1, 3, 4, 4});

  Tensor single = concat_channels<float>({&a});
  CHECK(single.data == a.data);

  Tensor both = concat_channels<float>({&a, &b});
  CHECK(both.dims == Dims{1, 5, 4, 4});
  // channel-slice recovery is bit-exact
  for (int c = 0; c < 2; ++c)
    for (int i = 0; i < 16; ++i) CHECK(both.plane(0, c)[i] == a.plane(0, c)[i]);
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < 16; ++i)
      CHECK(both.plane(0, 2 + c)[i] == b.plane(0, c)[i]);

  // head channel arithmetic: 64+32+16+32 = 144
  Tensor h1({1, 64, 2, 2}), h2({1, 32, 2, 2}), h3({1, 16, 2, 2}), h4({1, 32, 2, 2});
  CHECK(concat_channels<float>({&h1, &h2, &h3, &h4}).dims.c == 144);

  Tensor bad({2, 1, 4, 4});
  CHECK_THROWS_AS(concat_channels<float>({&a, &bad}), ShapeError);
}

TEST_CASE("add_elementwise") {
  Rng rng(49);
  Tensor a = oracle::random_tensor(rng, {1, 2, 3, 3});
  Tensor zero = Tensor::zeros(a.dims);
  CHECK(add_elementwise(a, zero).data == a.data);

  Tensor neg(a.dims);
  for (int64_t i = 0; i < a.size(); ++i) neg.data[i] = -a.data[i];
  for (float v : add_elementwise(a, neg).data) CHECK(v == 0.0f);

  Tensor u({1, 1, 1, 2}, {1, 2});
  Tensor v({1, 1, 1, 2}, {3, 4});
  Tensor sum = add_elementwise(u, v);
  CHECK(sum.data[0] == 4.0f);
  CHECK(sum.data[1] == 6.0f);

  Tensor wrong({1, 1, 2, 1});
  CHECK_THROWS_AS(add_elementwise(u, wrong), ShapeError);
}

TEST_CASE("scale_channels") {
  Rng rng(50);
  Tensor x = oracle::random_tensor(rng, {2, 3, 4, 4});
  Tensor ones = Tensor::full({2, 3, 1, 1}, 1.0f);
  CHECK(scale_channels(x, ones).data == x.data);

  Tensor zeros = Tensor::zeros({2, 3, 1, 1});
  for (float v : scale_channels(x, zeros).data) CHECK(v == 0.0f);

  Tensor single({1, 1, 1, 2}, {1.0f, 2.0f});
  Tensor half = Tensor::full({1, 1, 1, 1}, 0.5f);
  Tensor scaled = scale_channels(single, half);
  CHECK(scaled.data[0] == 0.5f);
  CHECK(scaled.data[1] == 1.0f);

  Tensor wrong({1, 2, 1, 1});
  CHECK_THROWS_AS(scale_channels(single, wrong), ShapeError);
}

TEST_CASE("kernels are bit-exact across worker counts") {
  Rng rng(51);
  Tensor x = oracle::random_tensor(rng, {2, 4, 16, 16});
  Tensor w = oracle::random_tensor(rng, {8, 4, 3, 3});
  Tensor wt = oracle::random_tensor(rng, {4, 4, 4, 4});

  set_worker_count(1);
  Tensor c1 = conv2d(x, w, nullptr, 1, 1);
  Tensor t1 = conv_transpose2d(x, wt, nullptr, 2, 1);
  BatchNormParams p1 = BatchNormParams::identity(4);
  Tensor b1 = batch_norm2d_train(x, p1);

  set_worker_count(3);
  Tensor c3 = conv2d(x, w, nullptr, 1, 1);
  Tensor t3 = conv_transpose2d(x, wt, nullptr, 2, 1);
  BatchNormParams p3 = BatchNormParams::identity(4);
  Tensor b3 = batch_norm2d_train(x, p3);
  set_worker_count(0);

  CHECK(c1.data == c3.data);
  CHECK(t1.data == t3.data);
  CHECK(b1.data == b3.data);
}
