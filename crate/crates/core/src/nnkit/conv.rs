//! 2-d convolution (cross-correlation) with stride, dilation, zero padding
//! and channel groups.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nnkit::tape::Var;
use crate::tensor::Tensor;

/// Static description of a convolution layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub groups: usize,
    pub has_bn: bool,
}

impl ConvSpec {
    pub fn new(in_ch: usize, out_ch: usize, kernel: usize) -> Self {
        ConvSpec {
            in_ch,
            out_ch,
            kernel,
            stride: 1,
            dilation: 1,
            groups: 1,
            has_bn: false,
        }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }

    pub fn groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn with_bn(mut self) -> Self {
        self.has_bn = true;
        self
    }

    /// Depthwise convolution: one filter per input channel.
    pub fn depthwise(channels: usize, kernel: usize) -> Self {
        Self::new(channels, channels, kernel).groups(channels)
    }

    /// Shape-preserving padding at stride 1.
    pub fn padding(&self) -> usize {
        self.dilation * (self.kernel - 1) / 2
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_ch, self.in_ch / self.groups, self.kernel, self.kernel]
    }

    pub fn geometry(&self) -> ConvGeom {
        ConvGeom {
            stride: self.stride,
            pad: self.padding(),
            dilation: self.dilation,
            groups: self.groups,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel % 2 == 0 {
            return Err(Error::invalid(format!("kernel {} must be odd", self.kernel)));
        }
        if self.stride == 0 || self.dilation == 0 || self.groups == 0 {
            return Err(Error::invalid("stride, dilation and groups must be >= 1"));
        }
        if self.in_ch % self.groups != 0 || self.out_ch % self.groups != 0 {
            return Err(Error::invalid(format!(
                "channels {}->{} not divisible by {} groups",
                self.in_ch, self.out_ch, self.groups
            )));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let w: usize = self.weight_shape().iter().product();
        let b = if self.has_bn { 2 * self.out_ch } else { self.out_ch };
        w + b
    }
}

/// Runtime geometry of a convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl ConvGeom {
    pub fn same(kernel: usize) -> Self {
        ConvGeom {
            stride: 1,
            pad: (kernel - 1) / 2,
            dilation: 1,
            groups: 1,
        }
    }

    pub fn out_size(&self, input: usize, kernel: usize) -> Result<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        if input + 2 * self.pad < span {
            return Err(Error::shape(format!(
                "input extent {input} (pad {}) smaller than kernel span {span}",
                self.pad
            )));
        }
        Ok((input + 2 * self.pad - span) / self.stride + 1)
    }
}

#[derive(Clone, Copy)]
struct Dims {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    oh: usize,
    ow: usize,
}

/// Cross-correlation of `x` (N×Cin×H×W) with `weight` (Cout×Cin/g×k×k).
pub fn conv2d<'t>(x: Var<'t>, weight: Var<'t>, bias: Option<Var<'t>>, geom: ConvGeom) -> Result<Var<'t>> {
    let xv = x.value();
    let wv = weight.value();
    let (n, cin, h, w) = xv.dims4()?;
    let (cout, cin_g, k, k2) = wv.dims4()?;
    if k != k2 {
        return Err(Error::shape("only square kernels are supported"));
    }
    if geom.groups == 0 || cin % geom.groups != 0 || cout % geom.groups != 0 || cin_g != cin / geom.groups {
        return Err(Error::shape(format!(
            "conv weight {:?} incompatible with input {:?} at {} groups",
            wv.shape(),
            xv.shape(),
            geom.groups
        )));
    }
    if let Some(b) = bias {
        if b.value().shape() != [cout] {
            return Err(Error::shape(format!("bias {:?} for {cout} outputs", b.value().shape())));
        }
    }
    let oh = geom.out_size(h, k)?;
    let ow = geom.out_size(w, k)?;
    let d = Dims {
        n,
        cin,
        h,
        w,
        cout,
        k,
        oh,
        ow,
    };
    x.tape()
        .add_macs((n * cout * oh * ow * cin_g * k * k) as u64);

    let bv = bias.map(|b| b.value());
    let mut out = if geom.groups == 1 {
        gemm_forward(&xv, &wv, d, geom)
    } else {
        grouped_forward(&xv, &wv, d, geom)
    };
    if let Some(bv) = &bv {
        let plane = oh * ow;
        for (i, chunk) in out.chunks_mut(plane).enumerate() {
            let b = bv.data()[i % cout];
            chunk.iter_mut().for_each(|v| *v += b);
        }
    }
    let y = Tensor::new(&[n, cout, oh, ow], out)?;

    let mut parents = vec![x, weight];
    parents.extend(bias);
    let has_bias = bias.is_some();
    Ok(x.tape().push(
        y,
        &parents,
        Box::new(move |g, needs| {
            let (gx, gw) = if geom.groups == 1 {
                gemm_backward(&xv, &wv, g.data(), d, geom, needs[0], needs[1])
            } else {
                grouped_backward(&xv, &wv, g.data(), d, geom, needs[0], needs[1])
            };
            let mut res = vec![
                gx.map(|v| Tensor::new(&[n, cin, h, w], v).expect("dx shape")),
                gw.map(|v| Tensor::new(wv.shape(), v).expect("dw shape")),
            ];
            if has_bias {
                let gb = needs[2].then(|| {
                    let mut gb = vec![0.0; cout];
                    let plane = oh * ow;
                    for (i, chunk) in g.data().chunks(plane).enumerate() {
                        gb[i % cout] += chunk.iter().sum::<f64>();
                    }
                    Tensor::new(&[cout], gb).expect("db shape")
                });
                res.push(gb);
            }
            res
        }),
    ))
}

fn is_pointwise(d: Dims, geom: ConvGeom) -> bool {
    d.k == 1 && geom.stride == 1 && geom.pad == 0
}

fn im2col(x: &[f64], d: Dims, geom: ConvGeom, col: &mut [f64]) {
    let Dims { cin, h, w, k, oh, ow, .. } = d;
    let plane = oh * ow;
    for c in 0..cin {
        for kh in 0..k {
            for kw in 0..k {
                let row = (c * k + kh) * k + kw;
                let dst = &mut col[row * plane..(row + 1) * plane];
                for i in 0..oh {
                    let ih = (i * geom.stride + kh * geom.dilation) as isize - geom.pad as isize;
                    for j in 0..ow {
                        let iw = (j * geom.stride + kw * geom.dilation) as isize - geom.pad as isize;
                        dst[i * ow + j] = if ih >= 0 && (ih as usize) < h && iw >= 0 && (iw as usize) < w {
                            x[(c * h + ih as usize) * w + iw as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

fn col2im(col: &[f64], d: Dims, geom: ConvGeom, dx: &mut [f64]) {
    let Dims { cin, h, w, k, oh, ow, .. } = d;
    let plane = oh * ow;
    for c in 0..cin {
        for kh in 0..k {
            for kw in 0..k {
                let row = (c * k + kh) * k + kw;
                let src = &col[row * plane..(row + 1) * plane];
                for i in 0..oh {
                    let ih = (i * geom.stride + kh * geom.dilation) as isize - geom.pad as isize;
                    if ih < 0 || ih as usize >= h {
                        continue;
                    }
                    for j in 0..ow {
                        let iw = (j * geom.stride + kw * geom.dilation) as isize - geom.pad as isize;
                        if iw >= 0 && (iw as usize) < w {
                            dx[(c * h + ih as usize) * w + iw as usize] += src[i * ow + j];
                        }
                    }
                }
            }
        }
    }
}

/// `c = a · b` (+ `beta · c`) on row-major buffers, optionally transposing
/// either operand. `a` is m×k and `b` is k×n after transposition.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, beta: f64, c: &mut [f64]) {
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the slices are at least as long as the strided extents above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn gemm_forward(x: &Tensor, wt: &Tensor, d: Dims, geom: ConvGeom) -> Vec<f64> {
    let in_sz = d.cin * d.h * d.w;
    let plane = d.oh * d.ow;
    let ckk = d.cin * d.k * d.k;
    let per_sample: Vec<Vec<f64>> = (0..d.n)
        .into_par_iter()
        .map(|b| {
            let xs = &x.data()[b * in_sz..(b + 1) * in_sz];
            let mut out = vec![0.0; d.cout * plane];
            if is_pointwise(d, geom) {
                gemm(d.cout, ckk, plane, wt.data(), false, xs, false, 0.0, &mut out);
            } else {
                let mut col = vec![0.0; ckk * plane];
                im2col(xs, d, geom, &mut col);
                gemm(d.cout, ckk, plane, wt.data(), false, &col, false, 0.0, &mut out);
            }
            out
        })
        .collect();
    per_sample.concat()
}

fn gemm_backward(
    x: &Tensor,
    wt: &Tensor,
    g: &[f64],
    d: Dims,
    geom: ConvGeom,
    need_x: bool,
    need_w: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let in_sz = d.cin * d.h * d.w;
    let plane = d.oh * d.ow;
    let ckk = d.cin * d.k * d.k;
    let parts: Vec<(Option<Vec<f64>>, Option<Vec<f64>>)> = (0..d.n)
        .into_par_iter()
        .map(|b| {
            let xs = &x.data()[b * in_sz..(b + 1) * in_sz];
            let gs = &g[b * d.cout * plane..(b + 1) * d.cout * plane];
            let pointwise = is_pointwise(d, geom);
            let col_buf;
            let col: &[f64] = if pointwise {
                xs
            } else if need_w {
                let mut c = vec![0.0; ckk * plane];
                im2col(xs, d, geom, &mut c);
                col_buf = c;
                &col_buf
            } else {
                &[]
            };
            let gw = need_w.then(|| {
                let mut gw = vec![0.0; d.cout * ckk];
                gemm(d.cout, plane, ckk, gs, false, col, true, 0.0, &mut gw);
                gw
            });
            let gx = need_x.then(|| {
                let mut dcol = vec![0.0; ckk * plane];
                gemm(ckk, d.cout, plane, wt.data(), true, gs, false, 0.0, &mut dcol);
                if pointwise {
                    dcol
                } else {
                    let mut dx = vec![0.0; in_sz];
                    col2im(&dcol, d, geom, &mut dx);
                    dx
                }
            });
            (gx, gw)
        })
        .collect();
    merge_parts(parts, need_x, need_w, d.cout * ckk)
}

fn merge_parts(
    parts: Vec<(Option<Vec<f64>>, Option<Vec<f64>>)>,
    need_x: bool,
    need_w: bool,
    w_len: usize,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let mut gx = need_x.then(Vec::new);
    let mut gw = need_w.then(|| vec![0.0; w_len]);
    // Fixed summation order over the batch keeps results bitwise reproducible.
    for (px, pw) in parts {
        if let (Some(gx), Some(px)) = (gx.as_mut(), px) {
            gx.extend(px);
        }
        if let (Some(gw), Some(pw)) = (gw.as_mut(), pw) {
            for (a, b) in gw.iter_mut().zip(pw) {
                *a += b;
            }
        }
    }
    (gx, gw)
}

fn grouped_forward(x: &Tensor, wt: &Tensor, d: Dims, geom: ConvGeom) -> Vec<f64> {
    let Dims { cin, h, w, cout, k, oh, ow, .. } = d;
    let cin_g = cin / geom.groups;
    let cout_g = cout / geom.groups;
    let in_sz = cin * h * w;
    let per_sample: Vec<Vec<f64>> = (0..d.n)
        .into_par_iter()
        .map(|b| {
            let xs = &x.data()[b * in_sz..(b + 1) * in_sz];
            let mut out = vec![0.0; cout * oh * ow];
            for oc in 0..cout {
                let grp = oc / cout_g;
                for icg in 0..cin_g {
                    let ic = grp * cin_g + icg;
                    for kh in 0..k {
                        for kw in 0..k {
                            let wv = wt.data()[((oc * cin_g + icg) * k + kh) * k + kw];
                            if wv == 0.0 {
                                continue;
                            }
                            for i in 0..oh {
                                let ih = (i * geom.stride + kh * geom.dilation) as isize - geom.pad as isize;
                                if ih < 0 || ih as usize >= h {
                                    continue;
                                }
                                let xrow = &xs[(ic * h + ih as usize) * w..(ic * h + ih as usize + 1) * w];
                                let orow = &mut out[(oc * oh + i) * ow..(oc * oh + i + 1) * ow];
                                for (j, o) in orow.iter_mut().enumerate() {
                                    let iw = (j * geom.stride + kw * geom.dilation) as isize - geom.pad as isize;
                                    if iw >= 0 && (iw as usize) < w {
                                        *o += wv * xrow[iw as usize];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            out
        })
        .collect();
    per_sample.concat()
}

fn grouped_backward(
    x: &Tensor,
    wt: &Tensor,
    g: &[f64],
    d: Dims,
    geom: ConvGeom,
    need_x: bool,
    need_w: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let Dims { cin, h, w, cout, k, oh, ow, .. } = d;
    let cin_g = cin / geom.groups;
    let cout_g = cout / geom.groups;
    let in_sz = cin * h * w;
    let out_sz = cout * oh * ow;
    let parts: Vec<(Option<Vec<f64>>, Option<Vec<f64>>)> = (0..d.n)
        .into_par_iter()
        .map(|b| {
            let xs = &x.data()[b * in_sz..(b + 1) * in_sz];
            let gs = &g[b * out_sz..(b + 1) * out_sz];
            let mut gx = need_x.then(|| vec![0.0; in_sz]);
            let mut gw = need_w.then(|| vec![0.0; wt.numel()]);
            for oc in 0..cout {
                let grp = oc / cout_g;
                for icg in 0..cin_g {
                    let ic = grp * cin_g + icg;
                    for kh in 0..k {
                        for kw in 0..k {
                            let widx = ((oc * cin_g + icg) * k + kh) * k + kw;
                            let wv = wt.data()[widx];
                            let mut acc = 0.0;
                            for i in 0..oh {
                                let ih = (i * geom.stride + kh * geom.dilation) as isize - geom.pad as isize;
                                if ih < 0 || ih as usize >= h {
                                    continue;
                                }
                                let xbase = (ic * h + ih as usize) * w;
                                for j in 0..ow {
                                    let iw = (j * geom.stride + kw * geom.dilation) as isize - geom.pad as isize;
                                    if iw < 0 || iw as usize >= w {
                                        continue;
                                    }
                                    let go = gs[(oc * oh + i) * ow + j];
                                    acc += go * xs[xbase + iw as usize];
                                    if let Some(gx) = gx.as_mut() {
                                        gx[xbase + iw as usize] += go * wv;
                                    }
                                }
                            }
                            if let Some(gw) = gw.as_mut() {
                                gw[widx] += acc;
                            }
                        }
                    }
                }
            }
            (gx, gw)
        })
        .collect();
    merge_parts(parts, need_x, need_w, wt.numel())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnkit::tape::Tape;

    #[test]
    fn output_size_formula() {
        let g = ConvGeom {
            stride: 2,
            pad: 1,
            dilation: 1,
            groups: 1,
        };
        assert_eq!(g.out_size(64, 3).unwrap(), 32);
        assert_eq!(g.out_size(7, 3).unwrap(), 4);
    }

    #[test]
    fn spec_padding_and_validation() {
        let s = ConvSpec::new(4, 8, 3).dilation(2);
        assert_eq!(s.padding(), 2);
        assert!(ConvSpec::new(4, 8, 2).validate().is_err());
        assert!(ConvSpec::new(6, 8, 3).groups(4).validate().is_err());
        assert!(ConvSpec::depthwise(8, 5).validate().is_ok());
    }

    #[test]
    fn identity_kernel_is_identity() {
        let tape = Tape::new();
        let x = Tensor::new(&[1, 1, 2, 2], vec![1., 2., 3., 4.]).unwrap();
        let xv = tape.constant(x.clone());
        let w = tape.constant(Tensor::ones(&[1, 1, 1, 1]));
        let y = conv2d(xv, w, None, ConvGeom::same(1)).unwrap();
        assert_eq!(*y.value(), x);
    }

    #[test]
    fn zero_kernel_gives_zero() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[1, 2, 5, 5]));
        let w = tape.constant(Tensor::zeros(&[3, 2, 3, 3]));
        let b = tape.constant(Tensor::zeros(&[3]));
        let y = conv2d(x, w, Some(b), ConvGeom::same(3)).unwrap();
        assert_eq!(y.value().max_abs(), 0.0);
    }

    #[test]
    fn mismatched_channels_error() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[1, 2, 5, 5]));
        let w = tape.constant(Tensor::zeros(&[3, 3, 3, 3]));
        assert!(conv2d(x, w, None, ConvGeom::same(3)).is_err());
    }
}
