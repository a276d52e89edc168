//! Global and windowed pooling, over space or over channels.

use crate::error::{Error, Result};
use crate::nnkit::tape::Var;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    /// Global average over H×W.
    Gap,
    /// Global max over H×W.
    Gmp,
    /// Windowed max with stride equal to the window.
    Max2d,
}

pub fn pool(x: Var<'_>, kind: PoolKind, window: usize) -> Result<Var<'_>> {
    match kind {
        PoolKind::Gap => global_avg_pool(x),
        PoolKind::Gmp => global_max_pool(x),
        PoolKind::Max2d => max_pool2d(x, window, window),
    }
}

/// N×C×H×W → N×C×1×1 mean.
pub fn global_avg_pool(x: Var<'_>) -> Result<Var<'_>> {
    let xv = x.value();
    let (n, c, h, w) = xv.dims4()?;
    let hw = h * w;
    let data = xv.data().chunks(hw).map(|p| p.iter().sum::<f64>() / hw as f64).collect();
    Ok(x.tape().push(
        Tensor::new(&[n, c, 1, 1], data)?,
        &[x],
        Box::new(move |g, _| {
            let mut gx = Tensor::zeros(&[n, c, h, w]);
            for (p, chunk) in gx.data_mut().chunks_mut(hw).enumerate() {
                let v = g.data()[p] / hw as f64;
                chunk.iter_mut().for_each(|x| *x = v);
            }
            vec![Some(gx)]
        }),
    ))
}

/// First index of the maximum; ties resolve to the earliest element.
fn argmax(vals: impl Iterator<Item = f64>) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in vals.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

/// N×C×H×W → N×C×1×1 maximum.
pub fn global_max_pool(x: Var<'_>) -> Result<Var<'_>> {
    let xv = x.value();
    let (n, c, h, w) = xv.dims4()?;
    let hw = h * w;
    let (idx, data): (Vec<usize>, Vec<f64>) = xv
        .data()
        .chunks(hw)
        .enumerate()
        .map(|(p, chunk)| {
            let (i, v) = argmax(chunk.iter().copied());
            (p * hw + i, v)
        })
        .unzip();
    Ok(x.tape().push(
        Tensor::new(&[n, c, 1, 1], data)?,
        &[x],
        Box::new(move |g, _| {
            let mut gx = Tensor::zeros(&[n, c, h, w]);
            for (p, &i) in idx.iter().enumerate() {
                gx.data_mut()[i] += g.data()[p];
            }
            vec![Some(gx)]
        }),
    ))
}

/// N×C×H×W → N×1×H×W mean over channels.
pub fn channel_mean(x: Var<'_>) -> Result<Var<'_>> {
    let xv = x.value();
    let (n, c, h, w) = xv.dims4()?;
    let hw = h * w;
    let mut out = Tensor::zeros(&[n, 1, h, w]);
    for b in 0..n {
        for ch in 0..c {
            for i in 0..hw {
                out.data_mut()[b * hw + i] += xv.data()[(b * c + ch) * hw + i];
            }
        }
    }
    let out = out.scale(1.0 / c as f64);
    Ok(x.tape().push(
        out,
        &[x],
        Box::new(move |g, _| {
            let mut gx = Tensor::zeros(&[n, c, h, w]);
            for b in 0..n {
                for ch in 0..c {
                    for i in 0..hw {
                        gx.data_mut()[(b * c + ch) * hw + i] = g.data()[b * hw + i] / c as f64;
                    }
                }
            }
            vec![Some(gx)]
        }),
    ))
}

/// N×C×H×W → N×1×H×W maximum over channels.
pub fn channel_max(x: Var<'_>) -> Result<Var<'_>> {
    let xv = x.value();
    let (n, c, h, w) = xv.dims4()?;
    let hw = h * w;
    let mut out = Tensor::zeros(&[n, 1, h, w]);
    let mut idx = vec![0usize; n * hw];
    for b in 0..n {
        for i in 0..hw {
            let (ch, v) = argmax((0..c).map(|ch| xv.data()[(b * c + ch) * hw + i]));
            out.data_mut()[b * hw + i] = v;
            idx[b * hw + i] = (b * c + ch) * hw + i;
        }
    }
    Ok(x.tape().push(
        out,
        &[x],
        Box::new(move |g, _| {
            let mut gx = Tensor::zeros(&[n, c, h, w]);
            for (p, &i) in idx.iter().enumerate() {
                gx.data_mut()[i] += g.data()[p];
            }
            vec![Some(gx)]
        }),
    ))
}

/// Windowed max pooling without padding.
pub fn max_pool2d(x: Var<'_>, window: usize, stride: usize) -> Result<Var<'_>> {
    let xv = x.value();
    let (n, c, h, w) = xv.dims4()?;
    if window == 0 || stride == 0 || window > h || window > w {
        return Err(Error::shape(format!("max pool window {window} on {h}×{w}")));
    }
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let mut idx = vec![0usize; n * c * oh * ow];
    for p in 0..n * c {
        for i in 0..oh {
            for j in 0..ow {
                let cells = (0..window * window).map(|t| {
                    let (di, dj) = (t / window, t % window);
                    (p * h + i * stride + di) * w + j * stride + dj
                });
                let mut best = (0, f64::NEG_INFINITY);
                for flat in cells {
                    if xv.data()[flat] > best.1 {
                        best = (flat, xv.data()[flat]);
                    }
                }
                let o = (p * oh + i) * ow + j;
                out.data_mut()[o] = best.1;
                idx[o] = best.0;
            }
        }
    }
    Ok(x.tape().push(
        out,
        &[x],
        Box::new(move |g, _| {
            let mut gx = Tensor::zeros(&[n, c, h, w]);
            for (o, &i) in idx.iter().enumerate() {
                gx.data_mut()[i] += g.data()[o];
            }
            vec![Some(gx)]
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnkit::tape::Tape;

    #[test]
    fn gap_of_constant_is_constant() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::full(&[2, 3, 4, 5], 2.5));
        let y = global_avg_pool(x).unwrap();
        assert!(y.value().data().iter().all(|&v| (v - 2.5).abs() < 1e-15));
    }

    #[test]
    fn max_pool_picks_window_maxima() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(&[1, 1, 2, 4], vec![1., 5., 2., 0., 3., 4., 7., 6.]).unwrap());
        let y = max_pool2d(x, 2, 2).unwrap();
        assert_eq!(y.value().data(), &[5., 7.]);
    }
}
