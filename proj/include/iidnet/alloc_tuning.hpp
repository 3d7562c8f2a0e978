#pragma once

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace iidnet {

// Activation and gradient buffers are freed and reallocated every step. Keeping
// them on the heap instead of fresh mmap pages saves the page-fault and zeroing
// cost (about 10% of a desk step). No-op outside glibc.
inline void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 256 << 20);
#endif
}

}  // namespace iidnet
