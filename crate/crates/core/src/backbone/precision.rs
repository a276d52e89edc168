//! Precision-generic inference path for a RepViT mixer, used to check that
//! branch fusion holds in single as well as double precision.

use num_traits::Float;

use crate::backbone::repvit::{BranchMode, RepVitBranchSet};
use crate::error::{Error, Result};
use crate::nnkit::norm::BN_EPS;
use crate::nnkit::params::{join, ParamStore};

fn cast<T: Float>(v: f64) -> T {
    T::from(v).expect("finite f64 converts")
}

fn load<T: Float>(store: &ParamStore, name: &str) -> Result<Vec<T>> {
    Ok(store.get(name)?.data().iter().map(|&v| cast(v)).collect())
}

fn depthwise<T: Float>(x: &[T], kernel: &[T], k: usize, c: usize, h: usize, w: usize) -> Vec<T> {
    let pad = (k / 2) as isize;
    let mut out = vec![T::zero(); x.len()];
    let batch = x.len() / (c * h * w);
    for b in 0..batch {
        for ch in 0..c {
            let base = (b * c + ch) * h * w;
            for i in 0..h {
                for j in 0..w {
                    let mut acc = T::zero();
                    for di in 0..k {
                        for dj in 0..k {
                            let (ii, jj) = (i as isize + di as isize - pad, j as isize + dj as isize - pad);
                            if ii >= 0 && (ii as usize) < h && jj >= 0 && (jj as usize) < w {
                                acc = acc + kernel[(ch * k + di) * k + dj] * x[base + ii as usize * w + jj as usize];
                            }
                        }
                    }
                    out[base + i * w + j] = acc;
                }
            }
        }
    }
    out
}

fn bn_eval<T: Float>(x: &mut [T], store: &ParamStore, prefix: &str, c: usize, hw: usize) -> Result<()> {
    let g: Vec<T> = load(store, &join(prefix, "weight"))?;
    let b: Vec<T> = load(store, &join(prefix, "bias"))?;
    let m: Vec<T> = load(store, &join(prefix, "running_mean"))?;
    let v: Vec<T> = load(store, &join(prefix, "running_var"))?;
    let eps: T = cast(BN_EPS);
    for (p, plane) in x.chunks_mut(hw).enumerate() {
        let ch = p % c;
        let inv = T::one() / (v[ch] + eps).sqrt();
        for val in plane {
            *val = g[ch] * (*val - m[ch]) * inv + b[ch];
        }
    }
    Ok(())
}

/// Eval-mode forward of a RepViT mixer on an N×C×H×W buffer in precision `T`.
pub fn repvit_eval<T: Float>(
    set: &RepVitBranchSet,
    store: &ParamStore,
    x: &[T],
    shape: [usize; 4],
) -> Result<Vec<T>> {
    let [_, c, h, w] = shape;
    if c != set.channels || x.len() != shape.iter().product::<usize>() {
        return Err(Error::shape(format!("input {shape:?} for {} channels", set.channels)));
    }
    let hw = h * w;
    let p = |n: &str| join(&set.prefix, n);
    let mixed: Vec<T> = match set.mode {
        BranchMode::Training => {
            let mut b3 = depthwise(x, &load::<T>(store, &p("dw3.weight"))?, 3, c, h, w);
            bn_eval(&mut b3, store, &p("dw3.bn"), c, hw)?;
            let mut b1 = depthwise(x, &load::<T>(store, &p("dw1.weight"))?, 1, c, h, w);
            bn_eval(&mut b1, store, &p("dw1.bn"), c, hw)?;
            let mut id = x.to_vec();
            bn_eval(&mut id, store, &p("identity_bn"), c, hw)?;
            b3.iter().zip(&b1).zip(&id).map(|((a, b), i)| *a + *b + *i).collect()
        }
        BranchMode::Fused => {
            let mut y = depthwise(x, &load::<T>(store, &p("fused.weight"))?, 3, c, h, w);
            let bias: Vec<T> = load(store, &p("fused.bias"))?;
            for (q, plane) in y.chunks_mut(hw).enumerate() {
                plane.iter_mut().for_each(|v| *v = *v + bias[q % c]);
            }
            y
        }
    };
    let act: Vec<T> = mixed.iter().map(|&v| v / (T::one() + (-v).exp())).collect();
    let pw: Vec<T> = load(store, &p("pw.weight"))?;
    let mut out = vec![T::zero(); act.len()];
    for (b, (src, dst)) in act.chunks(c * hw).zip(out.chunks_mut(c * hw)).enumerate() {
        let _ = b;
        for oc in 0..c {
            for ic in 0..c {
                let wv = pw[oc * c + ic];
                for i in 0..hw {
                    dst[oc * hw + i] = dst[oc * hw + i] + wv * src[ic * hw + i];
                }
            }
        }
    }
    bn_eval(&mut out, store, &p("pw.bn"), c, hw)?;
    Ok(out)
}
