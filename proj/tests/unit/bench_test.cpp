// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>

#include "polypseg/bench.hpp"

using namespace polypseg;

namespace {

ModelParams tiny_model() {
  ArchConfig arch;
  arch.input_size = 16;
  ModelParams params = build_model(arch);
  init_params(params, 1);
  return params;
}

}  // namespace

TEST_CASE("run_benchmark: latency accounting") {
  ModelParams params = tiny_model();
  BenchReport r = run_benchmark(params, 16, 7, 2, 1);

  CHECK(r.iters == 7);
  CHECK(r.warmup == 2);
  CHECK(r.input_size == 16);
  CHECK(r.workers >= 1);
  // warmup iterations never appear in the latency list
  CHECK(r.latencies_s.size() == 7);
  for (double v : r.latencies_s) CHECK(v > 0.0);

  double total = 0.0;
  for (double v : r.latencies_s) total += v;
  CHECK(std::abs(r.fps - 7.0 / total) <= 1e-9 * std::abs(r.fps));
  CHECK(std::abs(r.fps * r.mean_s - 1.0) <= 1e-9);
  CHECK(r.median_s <= r.p95_s);

  CHECK_THROWS_AS(run_benchmark(params, 16, 0, 0, 1), ContractError);
  CHECK_THROWS_AS(run_benchmark(params, 16, 1, -1, 1), ContractError);
}

TEST_CASE("run_benchmark: shapes and counts are reproducible") {
  ModelParams params = tiny_model();
  BenchReport a = run_benchmark(params, 16, 3, 1, 1);
  BenchReport b = run_benchmark(params, 16, 3, 1, 1);
  CHECK(a.iters == b.iters);
  CHECK(a.warmup == b.warmup);
  CHECK(a.input_size == b.input_size);
  CHECK(a.latencies_s.size() == b.latencies_s.size());
}

TEST_CASE("bench report formats") {
  ModelParams params = tiny_model();
  BenchReport r = run_benchmark(params, 16, 3, 0, 1);

  const std::string text = format_bench_text(r);
  CHECK(text.find("16x16") != std::string::npos);
  CHECK(text.find("workers") != std::string::npos);
  // published throughput reference is present and labeled as context
  CHECK(text.find("80.60 FPS") != std::string::npos);
  CHECK(text.find("hardware-dependent") != std::string::npos);

  const std::string csv = format_bench_csv(r);
  CHECK(csv.rfind("iters,warmup,mean_s,median_s,p95_s,fps\n", 0) == 0);
  CHECK(csv.find("3,0,") != std::string::npos);
}
