//! Pool-adjacent-violators for monotone least-squares fits.

use alloc::vec::Vec;

/// Least-squares non-increasing fit of `y` with per-point `weights`.
///
/// Panics if the slices differ in length.
pub fn pava_non_increasing_weighted(y: &[f64], weights: &[f64]) -> Vec<f64> {
    assert_eq!(y.len(), weights.len());
    // blocks of (weighted mean, total weight, length)
    let mut blocks: Vec<(f64, f64, usize)> = Vec::with_capacity(y.len());
    for (&v, &w) in y.iter().zip(weights) {
        blocks.push((v, w, 1));
        while blocks.len() > 1 {
            let n = blocks.len();
            let (m1, w1, l1) = blocks[n - 2];
            let (m2, w2, l2) = blocks[n - 1];
            if m2 <= m1 {
                break;
            }
            let w = w1 + w2;
            let m = if w > 0.0 {
                (m1 * w1 + m2 * w2) / w
            } else {
                (m1 + m2) / 2.0
            };
            blocks.truncate(n - 2);
            blocks.push((m, w, l1 + l2));
        }
    }
    let mut out = Vec::with_capacity(y.len());
    for (m, _, len) in blocks {
        out.extend(core::iter::repeat(m).take(len));
    }
    out
}

/// Unweighted least-squares non-increasing fit.
pub fn pava_non_increasing(y: &[f64]) -> Vec<f64> {
    let w: Vec<f64> = y.iter().map(|_| 1.0).collect();
    pava_non_increasing_weighted(y, &w)
}
