#pragma once

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace icl {

/// Keeps large activation buffers on the heap between training steps instead
/// of returning them to the OS, which otherwise costs a page fault per touch.
inline void configure_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

}  // namespace icl
