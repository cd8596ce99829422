//! Training allocates and frees the same large activation buffers every
//! step. glibc hands blocks above its mmap threshold straight back to the
//! kernel, so each step pays for fresh zero pages; keeping freed memory in
//! the heap removes most of those page faults.

use std::sync::Once;

static TUNE: Once = Once::new();

pub(crate) fn retain_freed_memory() {
    TUNE.call_once(|| {
        #[cfg(all(target_os = "linux", target_env = "gnu"))]
        // SAFETY: mallopt only adjusts allocator thresholds; it is called
        // once, before this crate holds any large allocation of its own.
        unsafe {
            // 32 MiB is the largest mmap threshold glibc accepts on 64-bit.
            libc::mallopt(libc::M_MMAP_THRESHOLD, 32 << 20);
            libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
        }
    });
}
