use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::imaging::{BinaryMask, CtSlice};

pub const MAX_ITERS: usize = 100;
pub const TOL: f64 = 1e-6;

fn nearest(v: f64, centroids: &[f64]) -> usize {
    let mut best = 0;
    for (i, &c) in centroids.iter().enumerate() {
        if (v - c).abs() < (v - centroids[best]).abs() {
            best = i;
        }
    }
    best
}

/// Lloyd's algorithm on pixel intensities; the darkest cluster is the lung.
///
/// Centroids start at the quantiles `(i + ½)/k`. The seed only matters when
/// a cluster empties and is re-seeded at a random pixel value.
pub fn kmeans_segment(image: &CtSlice, k: usize, seed: u64) -> Result<BinaryMask> {
    if k < 2 {
        return Err(Error::invalid(format!("k-means needs k ≥ 2, got {k}")));
    }
    let mut sorted = image.pixels.clone();
    sorted.sort_by(f64::total_cmp);
    let mut values: Vec<(f64, usize)> = Vec::new();
    for &v in &sorted {
        match values.last_mut() {
            Some((u, n)) if *u == v => *n += 1,
            _ => values.push((v, 1)),
        }
    }
    if values.len() < k {
        return Err(Error::invalid(format!(
            "{} distinct intensities cannot form {k} clusters",
            values.len()
        )));
    }
    let n = sorted.len();
    let mut centroids: Vec<f64> = (0..k)
        .map(|i| sorted[(((i as f64 + 0.5) / k as f64) * n as f64) as usize])
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..MAX_ITERS {
        let mut sum = vec![0.0; k];
        let mut count = vec![0usize; k];
        for &(v, m) in &values {
            let c = nearest(v, &centroids);
            sum[c] += v * m as f64;
            count[c] += m;
        }
        let mut shift = 0.0f64;
        for c in 0..k {
            let next = if count[c] > 0 {
                sum[c] / count[c] as f64
            } else {
                values[rng.random_range(0..values.len())].0
            };
            shift = shift.max((next - centroids[c]).abs());
            centroids[c] = next;
        }
        if shift < TOL {
            break;
        }
    }
    let lung = (0..k)
        .min_by(|&a, &b| centroids[a].total_cmp(&centroids[b]))
        .expect("k ≥ 2");
    Ok(BinaryMask {
        h: image.h,
        w: image.w,
        bits: image.pixels.iter().map(|&v| nearest(v, &centroids) == lung).collect(),
    })
}
