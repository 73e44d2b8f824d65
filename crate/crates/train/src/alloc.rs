//! Allocator tuning for the training loop.
//!
//! Every step allocates and frees buffers of a few megabytes. With glibc's
//! defaults those go through mmap and come back as fresh zeroed pages each
//! time; raising the thresholds keeps them on the heap.

#[cfg(all(target_os = "linux", target_env = "gnu"))]
pub fn tune() {
    static ONCE: std::sync::Once = std::sync::Once::new();
    ONCE.call_once(|| unsafe {
        // SAFETY: mallopt only adjusts allocator parameters; it is called
        // before the loop allocates anything large.
        libc::mallopt(libc::M_MMAP_THRESHOLD, 256 << 20);
        libc::mallopt(libc::M_TRIM_THRESHOLD, 512 << 20);
    });
}

#[cfg(not(all(target_os = "linux", target_env = "gnu")))]
pub fn tune() {}
