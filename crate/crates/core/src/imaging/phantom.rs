use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::imaging::{BinaryMask, CtSlice};

pub const BACKGROUND: f64 = 15.0;
pub const BODY: f64 = 190.0;
pub const LUNG: f64 = 45.0;

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSpec {
    pub size: usize,
    pub seed: u64,
    pub noise_sigma: f64,
    /// Number of 3-pixel speckles of each polarity; 0 for a clean phantom.
    pub speckles: usize,
}

impl PhantomSpec {
    pub fn new(size: usize, seed: u64) -> Self {
        PhantomSpec {
            size,
            seed,
            noise_sigma: 4.0,
            speckles: 0,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Region {
    Background,
    Body,
    Lung,
}

const TROMINOES: [[(isize, isize); 3]; 6] = [
    [(0, 0), (0, 1), (0, 2)],
    [(0, 0), (1, 0), (2, 0)],
    [(0, 0), (0, 1), (1, 0)],
    [(0, 0), (0, 1), (1, 1)],
    [(0, 0), (1, 0), (1, 1)],
    [(0, 1), (1, 0), (1, 1)],
];

fn inside(x: f64, y: f64, cx: f64, cy: f64, a: f64, b: f64) -> bool {
    ((x - cx) / a).powi(2) + ((y - cy) / b).powi(2) <= 1.0
}

/// Bright elliptical body on a dark background holding two dark lungs.
///
/// Returns the slice and the exact lung mask. Speckles are 3-pixel blobs,
/// dark ones inside the body and bright ones inside the lungs, each with a
/// one-pixel margin of its host region, so they never alter the lung mask.
pub fn phantom(spec: &PhantomSpec) -> Result<(CtSlice, BinaryMask)> {
    let n = spec.size;
    if n < 32 {
        return Err(Error::invalid(format!("phantom size {n} is below 32")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let s = n as f64;
    let mut jit = |lo: f64, hi: f64| rng.random_range(lo..hi);
    let (bx, by) = (s / 2.0 + jit(-0.02, 0.02) * s, s / 2.0 + jit(-0.02, 0.02) * s);
    let (ba, bb) = (jit(0.40, 0.44) * s, jit(0.34, 0.38) * s);
    let lungs: Vec<(f64, f64, f64, f64)> = [-1.0, 1.0]
        .iter()
        .map(|&side| {
            (
                bx + side * jit(0.17, 0.20) * s,
                by + jit(-0.02, 0.02) * s,
                jit(0.09, 0.12) * s,
                jit(0.18, 0.23) * s,
            )
        })
        .collect();
    let mut region = vec![Region::Background; n * n];
    for r in 0..n {
        for c in 0..n {
            let (x, y) = (c as f64 + 0.5, r as f64 + 0.5);
            region[r * n + c] = if lungs.iter().any(|&(cx, cy, a, b)| inside(x, y, cx, cy, a, b)) {
                Region::Lung
            } else if inside(x, y, bx, by, ba, bb) {
                Region::Body
            } else {
                Region::Background
            };
        }
    }
    let normal = Normal::new(0.0, spec.noise_sigma.max(0.0)).map_err(|e| Error::invalid(e.to_string()))?;
    let mut pixels: Vec<f64> = region
        .iter()
        .map(|reg| {
            let base = match reg {
                Region::Background => BACKGROUND,
                Region::Body => BODY,
                Region::Lung => LUNG,
            };
            (base + normal.sample(&mut rng)).round().clamp(0.0, 255.0)
        })
        .collect();

    let mut speck_rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed_5eed);
    let mut taken = vec![false; n * n];
    for (host, value) in [(Region::Body, LUNG), (Region::Lung, BODY)] {
        let mut placed = 0;
        let mut attempts = 0;
        while placed < spec.speckles && attempts < 200 * spec.speckles.max(1) {
            attempts += 1;
            let shape = TROMINOES[speck_rng.random_range(0..TROMINOES.len())];
            let (r0, c0) = (speck_rng.random_range(1..n - 3) as isize, speck_rng.random_range(1..n - 3) as isize);
            let ok = shape.iter().all(|&(dr, dc)| {
                (-1..=1).all(|er| {
                    (-1..=1).all(|ec| {
                        let p = ((r0 + dr + er) * n as isize + c0 + dc + ec) as usize;
                        region[p] == host && !taken[p]
                    })
                })
            });
            if !ok {
                continue;
            }
            for &(dr, dc) in &shape {
                for er in -1..=1 {
                    for ec in -1..=1 {
                        taken[((r0 + dr + er) * n as isize + c0 + dc + ec) as usize] = true;
                    }
                }
                pixels[((r0 + dr) * n as isize + c0 + dc) as usize] = value;
            }
            placed += 1;
        }
    }
    let mask = BinaryMask {
        h: n,
        w: n,
        bits: region.iter().map(|&r| r == Region::Lung).collect(),
    };
    Ok((CtSlice::new(n, n, pixels, format!("phantom-{}", spec.seed))?, mask))
}
