// SPDX-License-Identifier: Apache-2.0
#include "polypseg/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>

#include "polypseg/rng.hpp"
#include "polypseg/threads.hpp"

namespace polypseg {

BenchReport run_benchmark(const ModelParams& params, int input_size, int iters,
                          int warmup, int workers) {
  if (iters < 1) throw ContractError("bench: iters must be >= 1");
  if (warmup < 0) throw ContractError("bench: warmup must be >= 0");

  set_worker_count(workers);

  // The network is fully convolutional; rehost the weights at the requested
  // size for this run.
  ModelParams sized = params;
  sized.set_input_size(input_size);

  Rng rng(0xbe9c5);
  Tensor input({1, sized.arch.in_ch, input_size, input_size});
  for (auto& v : input.data) v = static_cast<float>(rng.next_unit());

  BenchReport r;
  r.iters = iters;
  r.warmup = warmup;
  r.workers = worker_count();
  r.input_size = input_size;
  r.latencies_s.reserve(iters);

  const ModelParams& frozen = sized;
  for (int i = 0; i < warmup; ++i) {
    (void)model_forward(frozen, input, ForwardOptions{});
  }
  using clock = std::chrono::steady_clock;
  for (int i = 0; i < iters; ++i) {
    const auto t0 = clock::now();
    (void)model_forward(frozen, input, ForwardOptions{});
    const auto t1 = clock::now();
    r.latencies_s.push_back(std::chrono::duration<double>(t1 - t0).count());
  }

  double total = 0.0;
  for (double v : r.latencies_s) total += v;
  r.mean_s = total / iters;
  r.fps = static_cast<double>(iters) / total;

  std::vector<double> sorted = r.latencies_s;
  std::sort(sorted.begin(), sorted.end());
  const std::size_t n = sorted.size();
  r.median_s = n % 2 == 1 ? sorted[n / 2]
                          : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
  // Nearest-rank p95.
  std::size_t rank = static_cast<std::size_t>(std::ceil(0.95 * n));
  if (rank < 1) rank = 1;
  r.p95_s = sorted[rank - 1];
  return r;
}

std::string format_bench_text(const BenchReport& r) {
  char buf[512];
  std::snprintf(
      buf, sizeof(buf),
      "inference benchmark\n"
      "  input        : 1x3x%dx%d (batch 1, model forward only, no I/O)\n"
      "  iterations   : %d (after %d warmup)\n"
      "  workers      : %d\n"
      "  latency mean : %.6f s\n"
      "  latency p50  : %.6f s\n"
      "  latency p95  : %.6f s\n"
      "  throughput   : %.2f FPS\n"
      "  reference    : 80.60 FPS published for this architecture at 512x512;\n"
      "                 hardware-dependent, shown for context only.\n",
      r.input_size, r.input_size, r.iters, r.warmup, r.workers, r.mean_s,
      r.median_s, r.p95_s, r.fps);
  return buf;
}

std::string format_bench_csv(const BenchReport& r) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "iters,warmup,mean_s,median_s,p95_s,fps\n%d,%d,%.9f,%.9f,%.9f,%.4f\n",
                r.iters, r.warmup, r.mean_s, r.median_s, r.p95_s, r.fps);
  return buf;
}

}  // namespace polypseg
