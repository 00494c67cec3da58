//! Shared interpolation helpers for image resampling.

/// Source taps for corner-aligned linear resampling of `src` samples onto
/// `dst` samples: output `i` reads `(lo, hi, frac)` as
/// `v[lo] + frac * (v[hi] - v[lo])`.
pub(crate) fn corner_aligned_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    if dst == 1 || src == 1 {
        return vec![(0, 0, 0.0); dst];
    }
    let ratio = (src - 1) as f64 / (dst - 1) as f64;
    (0..dst)
        .map(|i| {
            let pos = i as f64 * ratio;
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

#[inline]
pub(crate) fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + t * (b - a)
}
