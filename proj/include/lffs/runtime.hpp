#pragma once

namespace lffs {

/// Keeps large gradient buffers on the heap instead of fresh mmap pages.
/// Training allocates and frees many same-sized multi-megabyte buffers per
/// step; with the glibc defaults each one is a new mapping and page-faults on
/// first touch. No-op on other allocators. Call once at program start.
void tune_allocator();

// runtime.cpp also replaces the global operator new so that every heap block
// is 64-byte aligned. Bit-identical reruns depend on it; see the comment
// there.

}  // namespace lffs
