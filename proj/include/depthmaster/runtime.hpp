// SPDX-License-Identifier: Apache-2.0
#pragma once

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace depthmaster {

/// Keep large activation buffers in the heap instead of returning them to
/// the OS after every op. Training allocates and frees multi-megabyte
/// tensors at a high rate; without this most of the time goes to page
/// faults. Call once at program start; a no-op outside glibc.
inline void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

}  // namespace depthmaster
