// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "polypseg/model.hpp"

namespace polypseg {

/// Single-image (batch 1) forward-pass timing; file I/O and pre/post
/// processing are excluded. Latencies come from the monotonic clock.
struct BenchReport {
  int iters = 0;
  int warmup = 0;
  int workers = 1;
  int input_size = 0;
  std::vector<double> latencies_s;  // exactly iters entries
  double mean_s = 0.0;
  double median_s = 0.0;
  double p95_s = 0.0;
  double fps = 0.0;  // iters / sum(latencies) == 1 / mean
};

/// Runs `warmup` untimed then `iters` timed forward passes on a fixed
/// seeded random input of the given size.
BenchReport run_benchmark(const ModelParams& params, int input_size, int iters,
                          int warmup, int workers);

/// Human-readable report. Quotes the published 80.60 FPS reference for this
/// architecture at 512x512, labeled as hardware-dependent context.
std::string format_bench_text(const BenchReport& r);

/// CSV: `iters,warmup,mean_s,median_s,p95_s,fps`.
std::string format_bench_csv(const BenchReport& r);

}  // namespace polypseg
