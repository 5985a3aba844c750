// SPDX-License-Identifier: Apache-2.0
#include "polypseg/threads.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

#include <thread>

namespace polypseg {

namespace {
int g_workers = 0;
}

void set_worker_count(int workers) {
  g_workers = workers < 0 ? 0 : workers;
#ifdef _OPENMP
  if (g_workers > 0) omp_set_num_threads(g_workers);
#endif
}

int worker_count() {
  if (g_workers > 0) return g_workers;
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  unsigned hc = std::thread::hardware_concurrency();
  return hc == 0 ? 1 : static_cast<int>(hc);
#endif
}

}  // namespace polypseg
