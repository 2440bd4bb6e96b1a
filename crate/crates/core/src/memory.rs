//! High-water-mark accounting for tensor storage.
//!
//! Every tensor buffer registers its byte size on creation and releases it on
//! drop. Counters are per thread; benchmark cells are single-threaded, so the
//! peak observed on the timing thread is the peak transient footprint of the
//! forward pass.

use std::cell::Cell;

thread_local! {
    static CURRENT: Cell<usize> = const { Cell::new(0) };
    static PEAK: Cell<usize> = const { Cell::new(0) };
}

#[inline]
pub(crate) fn on_alloc(bytes: usize) {
    CURRENT.with(|c| {
        let now = c.get() + bytes;
        c.set(now);
        PEAK.with(|p| {
            if now > p.get() {
                p.set(now)
            }
        });
    });
}

#[inline]
pub(crate) fn on_free(bytes: usize) {
    CURRENT.with(|c| c.set(c.get().saturating_sub(bytes)));
}

/// Bytes of tensor storage currently live on this thread.
pub fn current_bytes() -> usize {
    CURRENT.with(Cell::get)
}

/// Highest value of [`current_bytes`] since the last [`reset_peak`].
pub fn peak_bytes() -> usize {
    PEAK.with(Cell::get)
}

/// Resets the peak to the current live byte count.
pub fn reset_peak() {
    let now = current_bytes();
    PEAK.with(|p| p.set(now));
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn peak_tracks_transient_allocations() {
        reset_peak();
        let base = current_bytes();
        {
            let _a = crate::Tensor::<f32>::zeros(&[256]);
            let _b = crate::Tensor::<f32>::zeros(&[256]);
        }
        assert_eq!(current_bytes(), base);
        assert_eq!(peak_bytes() - base, 2 * 256 * 4);
    }
}
