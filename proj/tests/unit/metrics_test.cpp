// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>

#include "polypseg/metrics.hpp"
#include "polypseg/rng.hpp"
#include "oracles.hpp"

using namespace polypseg;

TEST_CASE("confusion_counts basics") {
  Tensor ones = Tensor::full({1, 1, 2, 2}, 1.0f);
  ConfusionCounts perfect = confusion_counts(ones, ones, 0.5f);
  CHECK(perfect.tp == 4);
  CHECK(perfect.fp == 0);
  CHECK(perfect.fn == 0);
  CHECK(perfect.tn == 0);

  Tensor pred({1, 1, 2, 2}, {1, 1, 0, 0});
  Tensor gt({1, 1, 2, 2}, {1, 0, 1, 0});
  ConfusionCounts c = confusion_counts(pred, gt, 0.5f);
  CHECK(c.tp == 1);
  CHECK(c.fp == 1);
  CHECK(c.fn == 1);
  CHECK(c.tn == 1);
  CHECK(c.total() == 4);

  // pred = 1 - gt: no true positives, no true negatives
  Tensor inv({1, 1, 2, 2}, {0, 1, 0, 1});
  ConfusionCounts ci = confusion_counts(inv, gt, 0.5f);
  CHECK(ci.tp == 0);
  CHECK(ci.tn == 0);
  CHECK(ci.fp + ci.fn == 4);

  Tensor wrong({1, 1, 1, 4});
  CHECK_THROWS_AS(confusion_counts(pred, wrong, 0.5f), ContractError);
  Tensor nonbinary({1, 1, 2, 2}, {0.5f, 0, 1, 0});
  CHECK_THROWS_AS(confusion_counts(pred, nonbinary, 0.5f), ContractError);
  CHECK_THROWS_AS(confusion_counts(pred, gt, 0.0f), ContractError);
  CHECK_THROWS_AS(confusion_counts(pred, gt, 1.0f), ContractError);
}

TEST_CASE("confusion_counts: threshold is inclusive (pred >= t is positive)") {
  Tensor pred({1, 1, 1, 2}, {0.5f, 0.4999f});
  Tensor gt({1, 1, 1, 2}, {1, 1});
  ConfusionCounts c = confusion_counts(pred, gt, 0.5f);
  CHECK(c.tp == 1);
  CHECK(c.fn == 1);
}

TEST_CASE("compute_metrics: the hand case tp=fp=fn=tn=1") {
  MetricRow r = compute_metrics({1, 1, 1, 1});
  CHECK(r.miou == doctest::Approx(1.0 / 3.0));
  CHECK(r.dsc == doctest::Approx(0.5));
  CHECK(r.recall == doctest::Approx(0.5));
  CHECK(r.precision == doctest::Approx(0.5));
  CHECK(r.accuracy == doctest::Approx(0.5));
  CHECK(r.f2 == doctest::Approx(0.5));
}

TEST_CASE("compute_metrics: perfect nonempty prediction scores 1 everywhere") {
  MetricRow r = compute_metrics({10, 0, 0, 6});
  CHECK(r.miou == 1.0);
  CHECK(r.dsc == 1.0);
  CHECK(r.recall == 1.0);
  CHECK(r.precision == 1.0);
  CHECK(r.accuracy == 1.0);
  CHECK(r.f2 == 1.0);
}

TEST_CASE("compute_metrics: F2 weights recall over precision") {
  // tp=5, fp=5, fn=0: precision 0.5, recall 1, F2 = 25/30
  MetricRow r = compute_metrics({5, 5, 0, 2});
  CHECK(r.precision == doctest::Approx(0.5));
  CHECK(r.recall == doctest::Approx(1.0));
  CHECK(r.f2 == doctest::Approx(25.0 / 30.0));
}

TEST_CASE("compute_metrics: empty/empty convention") {
  MetricRow r = compute_metrics({0, 0, 0, 9});
  CHECK(r.miou == 1.0);
  CHECK(r.dsc == 1.0);
  CHECK(r.f2 == 1.0);
  CHECK(r.precision == 1.0);
  CHECK(r.recall == 1.0);
  CHECK(r.accuracy == 1.0);
}

TEST_CASE("metrics: fuzz against the pixel-set brute force") {
  Rng rng(90);
  for (int iter = 0; iter < 1000; ++iter) {
    std::vector<bool> pred(64), truth(64);
    // Mix in fully-empty and fully-full masks.
    const int mode = static_cast<int>(rng.next_below(8));
    for (int i = 0; i < 64; ++i) {
      pred[i] = mode == 0 ? false : rng.next_below(3) == 0;
      truth[i] = mode == 1 ? false : rng.next_below(3) == 0;
    }
    Tensor pt({1, 1, 8, 8});
    Tensor tt({1, 1, 8, 8});
    for (int i = 0; i < 64; ++i) {
      pt.data[i] = pred[i] ? 1.0f : 0.0f;
      tt.data[i] = truth[i] ? 1.0f : 0.0f;
    }
    MetricRow got = compute_metrics(confusion_counts(pt, tt, 0.5f));
    oracle::SetMetrics want = oracle::metrics_from_sets(pred, truth);
    CHECK(got.miou == want.iou);
    CHECK(got.dsc == want.dsc);
    CHECK(got.recall == want.recall);
    CHECK(got.precision == want.precision);
    CHECK(got.accuracy == want.accuracy);
    CHECK(got.f2 == want.f2);

    // Identities on every instance.
    CHECK(got.miou <= got.dsc + 1e-15);
    CHECK(got.dsc <= 1.0);
    CHECK(std::abs(got.dsc - 2.0 * got.miou / (1.0 + got.miou)) <= 1e-12);
    if (got.precision > 0 && got.recall > 0) {
      const double f2_pr = 5.0 * got.precision * got.recall /
                           (4.0 * got.precision + got.recall);
      CHECK(std::abs(got.f2 - f2_pr) <= 1e-9);
    }
  }
}

TEST_CASE("metrics: DSC symmetric under pred/gt swap; accuracy under complement") {
  Rng rng(91);
  for (int iter = 0; iter < 50; ++iter) {
    Tensor a({1, 1, 8, 8});
    Tensor b({1, 1, 8, 8});
    for (int i = 0; i < 64; ++i) {
      a.data[i] = rng.next_below(2) ? 1.0f : 0.0f;
      b.data[i] = rng.next_below(2) ? 1.0f : 0.0f;
    }
    MetricRow ab = compute_metrics(confusion_counts(a, b, 0.5f));
    MetricRow ba = compute_metrics(confusion_counts(b, a, 0.5f));
    CHECK(ab.dsc == ba.dsc);

    Tensor ac(a.dims), bc(b.dims);
    for (int i = 0; i < 64; ++i) {
      ac.data[i] = 1.0f - a.data[i];
      bc.data[i] = 1.0f - b.data[i];
    }
    MetricRow comp = compute_metrics(confusion_counts(ac, bc, 0.5f));
    CHECK(ab.accuracy == comp.accuracy);
  }
}

TEST_CASE("aggregate_dataset") {
  MetricRow zero{};
  MetricRow one{1, 1, 1, 1, 1, 1, {}};
  CHECK_THROWS_AS(aggregate_dataset({}), ContractError);

  MetricRow single = aggregate_dataset({one});
  CHECK(single.dsc == 1.0);

  MetricRow half = aggregate_dataset({zero, one});
  CHECK(half.miou == 0.5);
  CHECK(half.dsc == 0.5);
  CHECK(half.accuracy == 0.5);

  Rng rng(92);
  std::vector<MetricRow> rows;
  double sum_dsc = 0.0, sum_f2 = 0.0;
  for (int i = 0; i < 3; ++i) {
    MetricRow r;
    r.miou = rng.next_unit();
    r.dsc = rng.next_unit();
    r.recall = rng.next_unit();
    r.precision = rng.next_unit();
    r.accuracy = rng.next_unit();
    r.f2 = rng.next_unit();
    sum_dsc += r.dsc;
    sum_f2 += r.f2;
    rows.push_back(r);
  }
  MetricRow mean = aggregate_dataset(rows);
  CHECK(mean.dsc == doctest::Approx(sum_dsc / 3.0).epsilon(1e-12));
  CHECK(mean.f2 == doctest::Approx(sum_f2 / 3.0).epsilon(1e-12));
}

TEST_CASE("metrics CSV: header, 4 decimals, MEAN row") {
  MetricRow r1{1.0 / 3.0, 0.5, 0.5, 0.5, 0.5, 0.5, {}};
  MetricRow r2{1, 1, 1, 1, 1, 1, {}};
  MetricRow mean = aggregate_dataset({r1, r2});
  std::string csv = format_metrics_csv({"a.ppm", "b.ppm"}, {r1, r2}, mean);
  CHECK(csv ==
        "image,miou,dsc,recall,precision,accuracy,f2\n"
        "a.ppm,0.3333,0.5000,0.5000,0.5000,0.5000,0.5000\n"
        "b.ppm,1.0000,1.0000,1.0000,1.0000,1.0000,1.0000\n"
        "MEAN,0.6667,0.7500,0.7500,0.7500,0.7500,0.7500\n");
}
