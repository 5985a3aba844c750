// SPDX-License-Identifier: Apache-2.0
#pragma once

namespace polypseg {

/// Set the worker count used by the compute kernels. 0 restores the
/// default (all hardware threads). Results are bit-exact for any count:
/// each output element is produced by exactly one worker.
void set_worker_count(int workers);

/// Worker count the kernels will use for the next parallel region.
int worker_count();

}  // namespace polypseg
