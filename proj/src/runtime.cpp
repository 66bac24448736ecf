#include "lffs/runtime.hpp"

#include <cstdlib>
#include <new>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace lffs {

void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 64 << 20);
#endif
}

}  // namespace lffs

// Every heap block starts on a 64-byte boundary. Eigen peels the unaligned
// head of a buffer before its vector loop, so the summation order of a
// reduction depends on where malloc put the data. With malloc's 16-byte
// guarantee two identical runs could round differently.
namespace {

constexpr std::size_t kAlign = 64;

void* aligned_or_null(std::size_t n) {
  const std::size_t size = n == 0 ? kAlign : (n + kAlign - 1) / kAlign * kAlign;
  return std::aligned_alloc(kAlign, size);
}

}  // namespace

void* operator new(std::size_t n) {
  if (void* p = aligned_or_null(n)) return p;
  throw std::bad_alloc();
}
void* operator new[](std::size_t n) { return ::operator new(n); }
void* operator new(std::size_t n, const std::nothrow_t&) noexcept { return aligned_or_null(n); }
void* operator new[](std::size_t n, const std::nothrow_t&) noexcept { return aligned_or_null(n); }
void operator delete(void* p) noexcept { std::free(p); }
void operator delete[](void* p) noexcept { std::free(p); }
void operator delete(void* p, std::size_t) noexcept { std::free(p); }
void operator delete[](void* p, std::size_t) noexcept { std::free(p); }
