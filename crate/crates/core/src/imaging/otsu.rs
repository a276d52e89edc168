use std::cmp::Ordering;

use num_bigint::BigUint;

use crate::error::{Error, Result};
use crate::imaging::CtSlice;

pub fn histogram(levels: &[u8]) -> [u64; 256] {
    let mut h = [0u64; 256];
    for &v in levels {
        h[v as usize] += 1;
    }
    h
}

/// Compares `x²/b` with `y²/d` exactly.
fn cmp_scores(x: u128, b: u128, y: u128, d: u128) -> Ordering {
    let lhs = x.checked_mul(x).and_then(|v| v.checked_mul(d));
    let rhs = y.checked_mul(y).and_then(|v| v.checked_mul(b));
    match (lhs, rhs) {
        (Some(l), Some(r)) => l.cmp(&r),
        _ => {
            let (x, b, y, d) = (BigUint::from(x), BigUint::from(b), BigUint::from(y), BigUint::from(d));
            (&x * &x * d).cmp(&(&y * &y * b))
        }
    }
}

/// Threshold maximizing between-class variance, classes `≤ t` and `> t`.
///
/// Scores are compared as exact rationals `(S₀N − S n₀)² / (n₀ n₁)`, which
/// is the variance times `N²`; the smallest maximizing `t` wins.
pub fn otsu_threshold_hist(hist: &[u64; 256]) -> Result<u8> {
    if hist.iter().filter(|&&c| c > 0).count() < 2 {
        return Err(Error::DegenerateHistogram);
    }
    let n: u128 = hist.iter().map(|&c| c as u128).sum();
    let s: u128 = hist.iter().enumerate().map(|(v, &c)| v as u128 * c as u128).sum();
    let (mut n0, mut s0) = (0u128, 0u128);
    let mut best: Option<(u8, u128, u128)> = None;
    for (t, &count) in hist.iter().enumerate() {
        n0 += count as u128;
        s0 += t as u128 * count as u128;
        let n1 = n - n0;
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let diff = (s0 * n).abs_diff(s * n0);
        let den = n0 * n1;
        if best.is_none_or(|(_, bx, bd)| cmp_scores(diff, den, bx, bd) == Ordering::Greater) {
            best = Some((t as u8, diff, den));
        }
    }
    best.map(|b| b.0).ok_or(Error::DegenerateHistogram)
}

/// Otsu threshold on the 8-bit quantization of `image`.
pub fn otsu_threshold(image: &CtSlice) -> Result<u8> {
    otsu_threshold_hist(&histogram(&image.quantize()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_deltas_pick_lower_mode() {
        let mut h = [0u64; 256];
        h[10] = 50;
        h[240] = 50;
        assert_eq!(otsu_threshold_hist(&h).unwrap(), 10);
    }

    #[test]
    fn single_bright_pixel() {
        let mut h = [0u64; 256];
        h[0] = 99;
        h[255] = 1;
        assert_eq!(otsu_threshold_hist(&h).unwrap(), 0);
    }

    #[test]
    fn constant_is_degenerate() {
        let mut h = [0u64; 256];
        h[7] = 10;
        assert!(matches!(otsu_threshold_hist(&h), Err(Error::DegenerateHistogram)));
    }

    #[test]
    fn huge_counts_fall_back_to_big_integers() {
        let mut h = [0u64; 256];
        h[3] = 1 << 40;
        h[200] = 1 << 39;
        h[100] = 1 << 38;
        let t = otsu_threshold_hist(&h).unwrap();
        assert!((3..200).contains(&t));
    }
}
