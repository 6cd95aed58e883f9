#pragma once

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace hieratok {

/// Keeps large tensor buffers on the heap instead of fresh mmapped pages and
/// stops glibc from returning freed memory after every step. Call once at
/// program start; a no-op off glibc.
inline void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 256 << 20);
#endif
}

}  // namespace hieratok
