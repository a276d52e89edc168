//! Kolmogorov–Arnold layers with learnable spline activations.
//!
//! Each edge `(q, p)` carries a univariate function
//!
//! ```text
//! φ_qp(x) = w_b[q,p] · silu(x) + w_s[q,p] · Σ_i c[q,p,i] · B_i(x)
//! ```
//!
//! where `B_i` are degree-`k` B-splines on a uniform grid of `G` intervals
//! over `[-bound, bound]`, extended by `k` knots on each side. Output `q` is
//! the sum over inputs: `y_q = Σ_p φ_qp(x_p)`. Inputs outside the grid are
//! clamped to the boundary before the spline is evaluated; the SiLU base path
//! sees the raw value.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nnkit::conv::ConvSpec;
use crate::nnkit::layers::Conv;
use crate::nnkit::ops::{self, sigmoid_scalar, silu_scalar};
use crate::nnkit::params::{join, Ctx, ParamInit, ParamKind};
use crate::nnkit::tape::Var;
use crate::tensor::Tensor;

/// Uniform knot vector for degree-`k` B-splines.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplineGrid {
    pub grid_size: usize,
    pub degree: usize,
    pub bound: f64,
    knots: Vec<f64>,
}

impl SplineGrid {
    pub fn new(grid_size: usize, degree: usize, bound: f64) -> Result<Self> {
        if grid_size == 0 || !(bound > 0.0) || !bound.is_finite() {
            return Err(Error::invalid(format!(
                "spline grid needs G >= 1 and a positive bound (G={grid_size}, bound={bound})"
            )));
        }
        let h = 2.0 * bound / grid_size as f64;
        let knots = (0..=grid_size + 2 * degree)
            .map(|i| -bound + (i as f64 - degree as f64) * h)
            .collect();
        Ok(SplineGrid {
            grid_size,
            degree,
            bound,
            knots,
        })
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn spacing(&self) -> f64 {
        2.0 * self.bound / self.grid_size as f64
    }

    /// Number of basis functions, `G + k`.
    pub fn n_basis(&self) -> usize {
        self.grid_size + self.degree
    }

    pub fn clamp(&self, x: f64) -> f64 {
        x.clamp(-self.bound, self.bound)
    }

    /// Knot span `s` with `t_s <= x < t_{s+1}`, restricted to the grid so the
    /// right boundary belongs to the last interval.
    fn span(&self, x: f64) -> usize {
        let k = self.degree;
        let rel = ((x + self.bound) / self.spacing()).floor();
        let idx = if rel < 0.0 { 0 } else { rel as usize };
        k + idx.min(self.grid_size - 1)
    }

    /// Non-zero basis values at `x` (after clamping): `(first, values)` where
    /// `values[j]` is `B_{first + j}(x)` for `j = 0..=k`.
    pub fn basis_local(&self, x: f64) -> (usize, Vec<f64>) {
        let (first, vals, _) = self.basis_local_with_deriv(x);
        (first, vals)
    }

    /// Like [`basis_local`](Self::basis_local) but also returns `dB/dx`,
    /// zero when `x` lies outside the grid.
    pub fn basis_local_with_deriv(&self, x: f64) -> (usize, Vec<f64>, Vec<f64>) {
        let k = self.degree;
        let u = self.clamp(x);
        let s = self.span(u);
        let t = &self.knots;
        let mut n = vec![0.0; k + 1];
        let mut left = vec![0.0; k + 1];
        let mut right = vec![0.0; k + 1];
        n[0] = 1.0;
        let mut lower = vec![1.0];
        for j in 1..=k {
            left[j] = u - t[s + 1 - j];
            right[j] = t[s + j] - u;
            let mut saved = 0.0;
            for r in 0..j {
                let temp = n[r] / (right[r + 1] + left[j - r]);
                n[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            n[j] = saved;
            if j == k - 1 {
                lower = n[..k].to_vec();
            }
        }
        let mut d = vec![0.0; k + 1];
        let inside = x > -self.bound && x < self.bound;
        if k >= 1 && inside {
            // Uniform knots: dB_i^k = (B_i^{k-1} - B_{i+1}^{k-1}) / h, with the
            // degree k-1 values covering indices s-k+1..=s.
            let h = self.spacing();
            for (j, dj) in d.iter_mut().enumerate() {
                let a = if j >= 1 { lower[j - 1] } else { 0.0 };
                let b = if j < k { lower[j] } else { 0.0 };
                *dj = (a - b) / h;
            }
        }
        (s - k, n, d)
    }

    /// All `G + k` basis values at `x`.
    pub fn basis(&self, x: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.n_basis()];
        let (first, vals) = self.basis_local(x);
        out[first..first + vals.len()].copy_from_slice(&vals);
        out
    }
}

/// Basis matrix for many points: row `r` holds the `G + k` values at `xs[r]`.
pub fn bspline_basis(xs: &[f64], grid: &SplineGrid) -> Vec<Vec<f64>> {
    xs.iter().map(|&x| grid.basis(x)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KanSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub grid_size: usize,
    pub degree: usize,
    pub bound: f64,
}

impl KanSpec {
    pub fn new(in_dim: usize, out_dim: usize) -> Self {
        KanSpec {
            in_dim,
            out_dim,
            grid_size: 5,
            degree: 3,
            bound: 3.0,
        }
    }
}

/// Borrowed view of one layer's parameters.
#[derive(Clone, Copy)]
pub struct KanWeights<'a> {
    /// `m × n × (G + k)` spline coefficients.
    pub coeff: &'a Tensor,
    /// `m × n` base-path weights.
    pub base: &'a Tensor,
    /// `m × n` spline-path weights.
    pub spline: &'a Tensor,
}

impl KanWeights<'_> {
    fn check(&self, spec: &KanSpec, grid: &SplineGrid) -> Result<()> {
        let (m, n) = (spec.out_dim, spec.in_dim);
        if self.coeff.shape() != [m, n, grid.n_basis()] || self.base.shape() != [m, n] || self.spline.shape() != [m, n] {
            return Err(Error::shape(format!(
                "KAN weights {:?}/{:?}/{:?} for {n}->{m} with {} basis functions",
                self.coeff.shape(),
                self.base.shape(),
                self.spline.shape(),
                grid.n_basis()
            )));
        }
        Ok(())
    }
}

/// Edge function `φ_qp(x)`.
pub fn kan_phi(x: f64, q: usize, p: usize, spec: &KanSpec, grid: &SplineGrid, w: KanWeights<'_>) -> f64 {
    let n = spec.in_dim;
    let nb = grid.n_basis();
    let (first, vals) = grid.basis_local(x);
    let c = &w.coeff.data()[(q * n + p) * nb..(q * n + p + 1) * nb];
    let spline: f64 = vals.iter().enumerate().map(|(j, b)| c[first + j] * b).sum();
    w.base.data()[q * n + p] * silu_scalar(x) + w.spline.data()[q * n + p] * spline
}

/// `y_q = Σ_p φ_qp(x_p)` for one input vector.
pub fn kan_forward(x: &[f64], spec: &KanSpec, grid: &SplineGrid, w: KanWeights<'_>) -> Result<Vec<f64>> {
    w.check(spec, grid)?;
    if x.len() != spec.in_dim {
        return Err(Error::shape(format!(
            "KAN layer expects {} inputs, got {}",
            spec.in_dim,
            x.len()
        )));
    }
    let mut y = vec![0.0; spec.out_dim];
    let locals: Vec<_> = x.iter().map(|&v| grid.basis_local(v)).collect();
    accumulate_outputs(x, &locals, spec, grid, w, &mut y);
    Ok(y)
}

fn accumulate_outputs(
    x: &[f64],
    locals: &[(usize, Vec<f64>)],
    spec: &KanSpec,
    grid: &SplineGrid,
    w: KanWeights<'_>,
    y: &mut [f64],
) {
    let n = spec.in_dim;
    let nb = grid.n_basis();
    for (q, yq) in y.iter_mut().enumerate() {
        let mut acc = 0.0;
        for p in 0..n {
            let (first, vals) = &locals[p];
            let c = &w.coeff.data()[(q * n + p) * nb..];
            let s: f64 = vals.iter().enumerate().map(|(j, b)| c[first + j] * b).sum();
            acc += w.base.data()[q * n + p] * silu_scalar(x[p]) + w.spline.data()[q * n + p] * s;
        }
        *yq = acc;
    }
}

/// One KAN layer applied independently at every spatial position of an
/// N×n×H×W feature map, producing N×m×H×W.
#[derive(Clone, Debug)]
pub struct KanLayer {
    pub prefix: String,
    pub spec: KanSpec,
    pub grid: SplineGrid,
}

impl KanLayer {
    pub fn new(init: &mut ParamInit<'_>, prefix: &str, spec: KanSpec) -> Result<Self> {
        let grid = SplineGrid::new(spec.grid_size, spec.degree, spec.bound)?;
        let (m, n) = (spec.out_dim, spec.in_dim);
        let scale = 1.0 / (n as f64).sqrt();
        init.normal(&join(prefix, "coeff"), &[m, n, grid.n_basis()], 0.1 * scale, ParamKind::Weight);
        init.uniform(&join(prefix, "base_weight"), &[m, n], -scale, scale, ParamKind::Weight);
        init.constant(&join(prefix, "spline_weight"), &[m, n], 1.0, ParamKind::Weight);
        Ok(KanLayer {
            prefix: prefix.to_string(),
            spec,
            grid,
        })
    }

    pub fn forward<'t>(&self, cx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let coeff = cx.param(&join(&self.prefix, "coeff"))?;
        let base = cx.param(&join(&self.prefix, "base_weight"))?;
        let spline = cx.param(&join(&self.prefix, "spline_weight"))?;
        kan_apply(x, coeff, base, spline, self.spec, self.grid.clone())
    }
}

/// Differentiable per-position KAN map.
pub fn kan_apply<'t>(
    x: Var<'t>,
    coeff: Var<'t>,
    base: Var<'t>,
    spline: Var<'t>,
    spec: KanSpec,
    grid: SplineGrid,
) -> Result<Var<'t>> {
    let xv = x.value();
    let cv = coeff.value();
    let bv = base.value();
    let sv = spline.value();
    KanWeights {
        coeff: &cv,
        base: &bv,
        spline: &sv,
    }
    .check(&spec, &grid)?;
    let (nb_, c, h, w) = xv.dims4()?;
    if c != spec.in_dim {
        return Err(Error::shape(format!("KAN layer expects {} channels, got {c}", spec.in_dim)));
    }
    let (n, m) = (spec.in_dim, spec.out_dim);
    let hw = h * w;
    let k1 = spec.degree + 1;
    x.tape().add_macs((nb_ * hw * m * n * (k1 + 2)) as u64);

    let (xr, cr, br, sr): (&Tensor, &Tensor, &Tensor, &Tensor) = (&xv, &cv, &bv, &sv);
    let per_sample: Vec<Vec<f64>> = (0..nb_)
        .into_par_iter()
        .map(|b| {
            let weights = KanWeights {
                coeff: cr,
                base: br,
                spline: sr,
            };
            let mut out = vec![0.0; m * hw];
            let mut xin = vec![0.0; n];
            let mut yq = vec![0.0; m];
            for pos in 0..hw {
                for (p, v) in xin.iter_mut().enumerate() {
                    *v = xr.data()[(b * n + p) * hw + pos];
                }
                let locals: Vec<_> = xin.iter().map(|&v| grid.basis_local(v)).collect();
                accumulate_outputs(&xin, &locals, &spec, &grid, weights, &mut yq);
                for (q, &v) in yq.iter().enumerate() {
                    out[q * hw + pos] = v;
                }
            }
            out
        })
        .collect();
    let y = Tensor::new(&[nb_, m, h, w], per_sample.concat())?;

    Ok(x.tape().push(
        y,
        &[x, coeff, base, spline],
        Box::new(move |g, needs| {
            let nbasis = grid.n_basis();
            let (xv, cv, bv, sv): (&Tensor, &Tensor, &Tensor, &Tensor) = (&xv, &cv, &bv, &sv);
            let grid = &grid;
            let parts: Vec<[Vec<f64>; 4]> = (0..nb_)
                .into_par_iter()
                .map(|b| {
                    let mut gx = vec![0.0; n * hw];
                    let mut gc = vec![0.0; m * n * nbasis];
                    let mut gb = vec![0.0; m * n];
                    let mut gs = vec![0.0; m * n];
                    for pos in 0..hw {
                        for p in 0..n {
                            let xp = xv.data()[(b * n + p) * hw + pos];
                            let (first, vals, ders) = grid.basis_local_with_deriv(xp);
                            let sig = sigmoid_scalar(xp);
                            let silu = xp * sig;
                            let dsilu = sig * (1.0 + xp * (1.0 - sig));
                            let mut dx = 0.0;
                            for q in 0..m {
                                let go = g.data()[(b * m + q) * hw + pos];
                                if go == 0.0 {
                                    continue;
                                }
                                let e = q * n + p;
                                let cbase = e * nbasis + first;
                                let coeffs = &cv.data()[cbase..cbase + k1];
                                let sval: f64 = coeffs.iter().zip(&vals).map(|(c, v)| c * v).sum();
                                let sder: f64 = coeffs.iter().zip(&ders).map(|(c, d)| c * d).sum();
                                let ws = sv.data()[e];
                                gb[e] += go * silu;
                                gs[e] += go * sval;
                                for (j, v) in vals.iter().enumerate() {
                                    gc[cbase + j] += go * ws * v;
                                }
                                dx += go * (bv.data()[e] * dsilu + ws * sder);
                            }
                            gx[p * hw + pos] = dx;
                        }
                    }
                    [gx, gc, gb, gs]
                })
                .collect();
            let mut gx = Vec::with_capacity(nb_ * n * hw);
            let mut gc = vec![0.0; m * n * nbasis];
            let mut gb = vec![0.0; m * n];
            let mut gs = vec![0.0; m * n];
            for [px, pc, pb, ps] in parts {
                gx.extend(px);
                gc.iter_mut().zip(pc).for_each(|(a, v)| *a += v);
                gb.iter_mut().zip(pb).for_each(|(a, v)| *a += v);
                gs.iter_mut().zip(ps).for_each(|(a, v)| *a += v);
            }
            vec![
                needs[0].then(|| Tensor::new(&[nb_, n, h, w], gx).expect("dx")),
                needs[1].then(|| Tensor::new(&[m, n, nbasis], gc).expect("dc")),
                needs[2].then(|| Tensor::new(&[m, n], gb).expect("db")),
                needs[3].then(|| Tensor::new(&[m, n], gs).expect("ds")),
            ]
        }),
    ))
}

/// Bottleneck whose channel mixing is a KAN layer instead of convolutions:
/// 1×1 reduce to C/2, per-position KAN, 1×1 expand to C, optional residual.
#[derive(Clone, Debug)]
pub struct KanBottleneck {
    pub reduce: Conv,
    pub kan: KanLayer,
    pub expand: Conv,
    pub residual: bool,
}

impl KanBottleneck {
    pub fn new(init: &mut ParamInit<'_>, prefix: &str, channels: usize, residual: bool) -> Result<Self> {
        if channels < 2 || channels % 2 != 0 {
            return Err(Error::invalid(format!("KAN bottleneck needs an even channel count, got {channels}")));
        }
        let mid = channels / 2;
        let reduce = Conv::new(init, &join(prefix, "reduce"), ConvSpec::new(channels, mid, 1), None)?;
        let kan = KanLayer::new(init, &join(prefix, "kan"), KanSpec::new(mid, mid))?;
        let expand = Conv::new(init, &join(prefix, "expand"), ConvSpec::new(mid, channels, 1), None)?;
        Ok(KanBottleneck {
            reduce,
            kan,
            expand,
            residual,
        })
    }

    pub fn channels(&self) -> usize {
        self.reduce.spec.in_ch
    }

    pub fn forward<'t>(&self, cx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let r = self.reduce.forward(cx, x)?;
        let k = self.kan.forward(cx, r)?;
        let e = self.expand.forward(cx, k)?;
        if self.residual {
            ops::add(x, e)
        } else {
            Ok(e)
        }
    }
}
