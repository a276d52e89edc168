//! Differentiable elementwise, reduction and shape operations.

use crate::error::{Error, Result};
use crate::nnkit::tape::Var;
use crate::tensor::Tensor;

#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn silu_scalar(x: f64) -> f64 {
    x * sigmoid_scalar(x)
}

/// Elementwise op whose derivative is expressed through input and output.
fn unary<'t>(
    x: Var<'t>,
    f: impl Fn(f64) -> f64,
    df: impl Fn(f64, f64) -> f64 + 'static,
) -> Var<'t> {
    let xv = x.value();
    let y = xv.map(f);
    let yv = y.clone();
    x.tape().push(
        y,
        &[x],
        Box::new(move |g, _| {
            let data = g
                .data()
                .iter()
                .zip(xv.data().iter().zip(yv.data()))
                .map(|(&g, (&x, &y))| g * df(x, y))
                .collect();
            vec![Some(Tensor::new(g.shape(), data).expect("same shape"))]
        }),
    )
}

pub fn sigmoid(x: Var<'_>) -> Var<'_> {
    unary(x, sigmoid_scalar, |_, y| y * (1.0 - y))
}

pub fn silu(x: Var<'_>) -> Var<'_> {
    unary(x, silu_scalar, |x, _| {
        let s = sigmoid_scalar(x);
        s * (1.0 + x * (1.0 - s))
    })
}

pub fn relu(x: Var<'_>) -> Var<'_> {
    unary(x, |v| v.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
}

pub fn atan(x: Var<'_>) -> Var<'_> {
    unary(x, f64::atan, |x, _| 1.0 / (1.0 + x * x))
}

pub fn square(x: Var<'_>) -> Var<'_> {
    unary(x, |v| v * v, |x, _| 2.0 * x)
}

pub fn exp(x: Var<'_>) -> Var<'_> {
    unary(x, f64::exp, |_, y| y)
}

/// `a * x + b` with scalar `a`, `b`.
pub fn affine(x: Var<'_>, a: f64, b: f64) -> Var<'_> {
    unary(x, move |v| a * v + b, move |_, _| a)
}

pub fn scale(x: Var<'_>, a: f64) -> Var<'_> {
    affine(x, a, 0.0)
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("cannot broadcast {a:?} with {b:?}")));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            (x, y) if x == y => Ok(x),
            (1, y) => Ok(y),
            (x, 1) => Ok(x),
            _ => Err(Error::shape(format!("cannot broadcast {a:?} with {b:?}"))),
        })
        .collect()
}

/// For each element of `out`, the flat index of the broadcast source element.
fn source_indices(out: &[usize], src: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0usize; rank];
    let mut s = 1;
    for d in (0..rank).rev() {
        strides[d] = if src[d] == 1 { 0 } else { s };
        s *= src[d];
    }
    let numel: usize = out.iter().product();
    let mut idx = vec![0usize; numel];
    let mut counter = vec![0usize; rank];
    let mut cur = 0usize;
    for slot in idx.iter_mut() {
        *slot = cur;
        for d in (0..rank).rev() {
            counter[d] += 1;
            cur += strides[d];
            if counter[d] < out[d] {
                break;
            }
            cur -= strides[d] * counter[d];
            counter[d] = 0;
        }
    }
    idx
}

/// Broadcasting binary op. `partials(a, b)` returns `(d/da, d/db)`.
fn binary<'t>(
    a: Var<'t>,
    b: Var<'t>,
    f: impl Fn(f64, f64) -> f64,
    partials: impl Fn(f64, f64) -> (f64, f64) + 'static,
) -> Result<Var<'t>> {
    let av = a.value();
    let bv = b.value();
    let out_shape = broadcast_shape(av.shape(), bv.shape())?;
    if av.shape() == bv.shape() {
        let y = av.zip_map(&bv, &f)?;
        return Ok(a.tape().push(
            y,
            &[a, b],
            Box::new(move |g, needs| {
                let mut ga = needs[0].then(|| Tensor::zeros(av.shape()));
                let mut gb = needs[1].then(|| Tensor::zeros(bv.shape()));
                for i in 0..g.numel() {
                    let (da, db) = partials(av.data()[i], bv.data()[i]);
                    if let Some(ga) = ga.as_mut() {
                        ga.data_mut()[i] = g.data()[i] * da;
                    }
                    if let Some(gb) = gb.as_mut() {
                        gb.data_mut()[i] = g.data()[i] * db;
                    }
                }
                vec![ga, gb]
            }),
        ));
    }
    let ia = source_indices(&out_shape, av.shape());
    let ib = source_indices(&out_shape, bv.shape());
    let data = ia
        .iter()
        .zip(&ib)
        .map(|(&i, &j)| f(av.data()[i], bv.data()[j]))
        .collect();
    let y = Tensor::new(&out_shape, data)?;
    Ok(a.tape().push(
        y,
        &[a, b],
        Box::new(move |g, needs| {
            let mut ga = needs[0].then(|| Tensor::zeros(av.shape()));
            let mut gb = needs[1].then(|| Tensor::zeros(bv.shape()));
            for (k, (&i, &j)) in ia.iter().zip(&ib).enumerate() {
                let (da, db) = partials(av.data()[i], bv.data()[j]);
                if let Some(ga) = ga.as_mut() {
                    ga.data_mut()[i] += g.data()[k] * da;
                }
                if let Some(gb) = gb.as_mut() {
                    gb.data_mut()[j] += g.data()[k] * db;
                }
            }
            vec![ga, gb]
        }),
    ))
}

pub fn add<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    binary(a, b, |x, y| x + y, |_, _| (1.0, 1.0))
}

pub fn sub<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    binary(a, b, |x, y| x - y, |_, _| (1.0, -1.0))
}

pub fn mul<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    binary(a, b, |x, y| x * y, |x, y| (y, x))
}

pub fn div<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    binary(a, b, |x, y| x / y, |x, y| (1.0 / y, -x / (y * y)))
}

pub fn minimum<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    binary(a, b, f64::min, |x, y| if x <= y { (1.0, 0.0) } else { (0.0, 1.0) })
}

pub fn maximum<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    binary(a, b, f64::max, |x, y| if x >= y { (1.0, 0.0) } else { (0.0, 1.0) })
}

/// Sum of all elements as a one-element tensor.
pub fn sum(x: Var<'_>) -> Var<'_> {
    let xv = x.value();
    let shape = xv.shape().to_vec();
    x.tape().push(
        Tensor::scalar(xv.sum()),
        &[x],
        Box::new(move |g, _| vec![Some(Tensor::full(&shape, g.data()[0]))]),
    )
}

pub fn mean(x: Var<'_>) -> Var<'_> {
    let n = x.value().numel() as f64;
    scale(sum(x), 1.0 / n)
}

/// `sum(x * w)` against a constant weight tensor.
pub fn weighted_sum<'t>(x: Var<'t>, w: &Tensor) -> Result<Var<'t>> {
    let xv = x.value();
    if xv.shape() != w.shape() {
        return Err(Error::shape(format!(
            "weighted_sum of {:?} with weights {:?}",
            xv.shape(),
            w.shape()
        )));
    }
    let s = xv.data().iter().zip(w.data()).map(|(a, b)| a * b).sum();
    let w = w.clone();
    Ok(x.tape().push(
        Tensor::scalar(s),
        &[x],
        Box::new(move |g, _| vec![Some(w.scale(g.data()[0]))]),
    ))
}

pub fn reshape<'t>(x: Var<'t>, shape: &[usize]) -> Result<Var<'t>> {
    let xv = x.value();
    let old = xv.shape().to_vec();
    let y = (*xv).clone().reshape(shape)?;
    Ok(x.tape().push(
        y,
        &[x],
        Box::new(move |g, _| vec![Some(g.clone().reshape(&old).expect("same numel"))]),
    ))
}

/// Concatenates NCHW tensors along the channel axis.
pub fn concat_channels<'t>(xs: &[Var<'t>]) -> Result<Var<'t>> {
    let first = xs
        .first()
        .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
    let vals: Vec<_> = xs.iter().map(|x| x.value()).collect();
    let (n, _, h, w) = vals[0].dims4()?;
    let mut chans = Vec::with_capacity(vals.len());
    for v in &vals {
        let (vn, vc, vh, vw) = v.dims4()?;
        if (vn, vh, vw) != (n, h, w) {
            return Err(Error::shape(format!(
                "concat of {:?} with {:?}",
                vals[0].shape(),
                v.shape()
            )));
        }
        chans.push(vc);
    }
    let total: usize = chans.iter().sum();
    let hw = h * w;
    let mut out = Tensor::zeros(&[n, total, h, w]);
    let mut offset = 0;
    for (v, &c) in vals.iter().zip(&chans) {
        for b in 0..n {
            let src = &v.data()[b * c * hw..(b + 1) * c * hw];
            let dst_start = (b * total + offset) * hw;
            out.data_mut()[dst_start..dst_start + c * hw].copy_from_slice(src);
        }
        offset += c;
    }
    Ok(first.tape().push(
        out,
        xs,
        Box::new(move |g, needs| {
            let mut offset = 0;
            chans
                .iter()
                .zip(needs)
                .map(|(&c, &need)| {
                    let res = need.then(|| {
                        let mut gi = Tensor::zeros(&[n, c, h, w]);
                        for b in 0..n {
                            let src_start = (b * total + offset) * hw;
                            gi.data_mut()[b * c * hw..(b + 1) * c * hw]
                                .copy_from_slice(&g.data()[src_start..src_start + c * hw]);
                        }
                        gi
                    });
                    offset += c;
                    res
                })
                .collect()
        }),
    ))
}

/// Channels `start..start + len` of an NCHW tensor.
pub fn slice_channels(x: Var<'_>, start: usize, len: usize) -> Result<Var<'_>> {
    let xv = x.value();
    let (n, c, h, w) = xv.dims4()?;
    if start + len > c || len == 0 {
        return Err(Error::shape(format!(
            "channel slice {start}..{} of {c} channels",
            start + len
        )));
    }
    let hw = h * w;
    let mut out = Tensor::zeros(&[n, len, h, w]);
    for b in 0..n {
        let src = (b * c + start) * hw;
        out.data_mut()[b * len * hw..(b + 1) * len * hw]
            .copy_from_slice(&xv.data()[src..src + len * hw]);
    }
    Ok(x.tape().push(
        out,
        &[x],
        Box::new(move |g, _| {
            let mut gx = Tensor::zeros(&[n, c, h, w]);
            for b in 0..n {
                let dst = (b * c + start) * hw;
                gx.data_mut()[dst..dst + len * hw]
                    .copy_from_slice(&g.data()[b * len * hw..(b + 1) * len * hw]);
            }
            vec![Some(gx)]
        }),
    ))
}

/// Nearest-neighbour upsampling by 2 in both spatial axes.
pub fn upsample_nearest2x(x: Var<'_>) -> Result<Var<'_>> {
    let xv = x.value();
    let (n, c, h, w) = xv.dims4()?;
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    for p in 0..n * c {
        for i in 0..oh {
            for j in 0..ow {
                out.data_mut()[(p * oh + i) * ow + j] = xv.data()[(p * h + i / 2) * w + j / 2];
            }
        }
    }
    Ok(x.tape().push(
        out,
        &[x],
        Box::new(move |g, _| {
            let mut gx = Tensor::zeros(&[n, c, h, w]);
            for p in 0..n * c {
                for i in 0..oh {
                    for j in 0..ow {
                        gx.data_mut()[(p * h + i / 2) * w + j / 2] += g.data()[(p * oh + i) * ow + j];
                    }
                }
            }
            vec![Some(gx)]
        }),
    ))
}

/// Picks elements by flat index into a 1-d tensor.
pub fn gather<'t>(x: Var<'t>, indices: &[usize]) -> Result<Var<'t>> {
    let xv = x.value();
    if let Some(&bad) = indices.iter().find(|&&i| i >= xv.numel()) {
        return Err(Error::shape(format!(
            "gather index {bad} out of range for {} elements",
            xv.numel()
        )));
    }
    let data = indices.iter().map(|&i| xv.data()[i]).collect();
    let shape = xv.shape().to_vec();
    let indices = indices.to_vec();
    Ok(x.tape().push(
        Tensor::new(&[indices.len()], data)?,
        &[x],
        Box::new(move |g, _| {
            let mut gx = Tensor::zeros(&shape);
            for (k, &i) in indices.iter().enumerate() {
                gx.data_mut()[i] += g.data()[k];
            }
            vec![Some(gx)]
        }),
    ))
}

/// Numerically stable binary cross-entropy on logits, weighted and summed.
///
/// `target` and `weight` are constants with the same shape as `logits`.
pub fn bce_with_logits_sum<'t>(logits: Var<'t>, target: &Tensor, weight: &Tensor) -> Result<Var<'t>> {
    let xv = logits.value();
    if xv.shape() != target.shape() || xv.shape() != weight.shape() {
        return Err(Error::shape(format!(
            "bce logits {:?}, target {:?}, weight {:?}",
            xv.shape(),
            target.shape(),
            weight.shape()
        )));
    }
    let mut total = 0.0;
    for ((&x, &t), &w) in xv.data().iter().zip(target.data()).zip(weight.data()) {
        if w != 0.0 {
            total += w * bce_logit_scalar(x, t);
        }
    }
    let target = target.clone();
    let weight = weight.clone();
    Ok(logits.tape().push(
        Tensor::scalar(total),
        &[logits],
        Box::new(move |g, _| {
            let g0 = g.data()[0];
            let data = xv
                .data()
                .iter()
                .zip(target.data())
                .zip(weight.data())
                .map(|((&x, &t), &w)| g0 * w * (sigmoid_scalar(x) - t))
                .collect();
            vec![Some(Tensor::new(xv.shape(), data).expect("same shape"))]
        }),
    ))
}

#[inline]
pub fn bce_logit_scalar(x: f64, t: f64) -> f64 {
    x.max(0.0) - x * t + (-x.abs()).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnkit::tape::Tape;

    #[test]
    fn sigmoid_and_silu_at_zero() {
        assert_eq!(sigmoid_scalar(0.0), 0.5);
        assert_eq!(silu_scalar(0.0), 0.0);
    }

    #[test]
    fn broadcast_mul_matches_manual() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::new(&[1, 2, 1, 2], vec![1., 2., 3., 4.]).unwrap(), true);
        let b = tape.leaf(Tensor::new(&[1, 2, 1, 1], vec![10., 100.]).unwrap(), true);
        let y = mul(a, b).unwrap();
        assert_eq!(y.value().data(), &[10., 20., 300., 400.]);
        let s = sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(b).unwrap().data(), &[3., 7.]);
        assert_eq!(g.get(a).unwrap().data(), &[10., 10., 100., 100.]);
    }

    #[test]
    fn concat_then_slice_round_trips() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::new(&[2, 1, 1, 2], vec![1., 2., 3., 4.]).unwrap(), true);
        let b = tape.leaf(Tensor::new(&[2, 2, 1, 2], (5..13).map(f64::from).collect()).unwrap(), true);
        let c = concat_channels(&[a, b]).unwrap();
        assert_eq!(c.shape(), vec![2, 3, 1, 2]);
        let back = slice_channels(c, 1, 2).unwrap();
        assert_eq!(*back.value(), *b.value());
    }

    #[test]
    fn bce_matches_naive_formula() {
        for &(x, t) in &[(0.3, 1.0), (-2.0, 0.0), (5.0, 0.25), (-40.0, 1.0)] {
            let p = sigmoid_scalar(x);
            let naive = -(t * p.ln() + (1.0 - t) * (1.0 - p).ln());
            assert!((bce_logit_scalar(x, t) - naive).abs() < 1e-9 * naive.max(1.0));
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[1, 2, 3, 3]));
        let b = tape.constant(Tensor::zeros(&[1, 3, 3, 3]));
        assert!(add(a, b).is_err());
    }
}
