//! Engine-level tracking of tensor/workspace buffer bytes. The benchmark
//! harness compares peak tracked allocation between the sparse and dense arms;
//! this is a portable proxy, not an allocator hook.

use std::sync::atomic::{AtomicUsize, Ordering};

static CURRENT: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);

pub fn on_alloc(bytes: usize) {
    let now = CURRENT.fetch_add(bytes, Ordering::Relaxed) + bytes;
    PEAK.fetch_max(now, Ordering::Relaxed);
}

pub fn on_free(bytes: usize) {
    CURRENT.fetch_sub(bytes, Ordering::Relaxed);
}

/// Resets the peak to the current level (call between benchmark runs).
pub fn reset_peak() {
    PEAK.store(CURRENT.load(Ordering::Relaxed), Ordering::Relaxed);
}

pub fn peak_bytes() -> usize {
    PEAK.load(Ordering::Relaxed)
}

pub fn current_bytes() -> usize {
    CURRENT.load(Ordering::Relaxed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn peak_tracks_high_water_mark() {
        reset_peak();
        let base = peak_bytes();
        on_alloc(1000);
        on_alloc(500);
        on_free(1500);
        assert!(peak_bytes() >= base + 1500);
        reset_peak();
        assert_eq!(peak_bytes(), current_bytes());
    }
}
