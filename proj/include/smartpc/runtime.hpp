#pragma once

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace smartpc {

/// Keeps large tensor buffers on the heap instead of fresh mmap/munmap pairs.
/// Forward passes allocate and drop multi-megabyte activations per sample;
/// with glibc's default thresholds each one is a syscall plus page faults.
/// Call once at program start. No-op outside glibc.
inline void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

}  // namespace smartpc
