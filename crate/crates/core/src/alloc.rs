//! Allocator tuning for workloads that cycle through layer-sized buffers.
//!
//! glibc raises its mmap threshold every time a large mmapped block is
//! freed, so after the first layer later 16–32 MiB buffers come from the
//! brk heap, and freed holes stay resident. Peak RSS then creeps up layer
//! by layer even though the live working set is constant. Pinning the
//! threshold keeps every large buffer in its own mapping, returned to the
//! OS on free.

/// Buffers at least this large bypass the heap.
pub const MMAP_THRESHOLD: usize = 128 * 1024;

/// Pins the allocator's mmap threshold (once per process). Returns whether
/// the setting is in effect; a no-op off glibc.
pub fn return_large_buffers_to_os() -> bool {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    {
        static APPLIED: std::sync::OnceLock<bool> = std::sync::OnceLock::new();
        *APPLIED.get_or_init(|| {
            // SAFETY: mallopt only adjusts allocator parameters and is thread-safe.
            unsafe { libc::mallopt(libc::M_MMAP_THRESHOLD, MMAP_THRESHOLD as libc::c_int) == 1 }
        })
    }
    #[cfg(not(all(target_os = "linux", target_env = "gnu")))]
    {
        false
    }
}
