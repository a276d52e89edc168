//! Finite-difference verification of analytic gradients.
//!
//! The scalar loss is `sum(w ⊙ block(x))` with a fixed random weight tensor
//! `w`, so every output element contributes with a distinct sensitivity.
//! Central differences use step `1e-4` in double precision and the relative
//! error of a coordinate is `|a − n| / max(|a|, |n|, 1e-8)`.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::nnkit::ops::weighted_sum;
use crate::nnkit::params::{Ctx, ParamStore};
use crate::nnkit::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-4;
const DENOM_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Coordinates sampled per tensor; `None` checks every coordinate.
    pub max_coords: Option<usize>,
    /// Run the block in train mode (batch statistics).
    pub train: bool,
    pub input_std: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: FD_STEP,
            max_coords: Some(12),
            train: true,
            input_std: 1.0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct TensorError {
    pub name: String,
    pub max_rel_error: f64,
    pub coords_checked: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_tensor: String,
    pub tensors: Vec<TensorError>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOM_FLOOR)
}

fn loss_value<F>(store: &ParamStore, x: &Tensor, w: &Tensor, train: bool, f: &F) -> Result<f64>
where
    F: for<'t> Fn(&Ctx<'t>, Var<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let cx = Ctx::new(&tape, store, train);
    let xv = tape.constant(x.clone());
    let out = f(&cx, xv)?;
    let out = out.value();
    if out.shape() != w.shape() {
        return Err(Error::shape(format!("output {:?} vs weights {:?}", out.shape(), w.shape())));
    }
    Ok(neumaier_dot(out.data(), w.data()))
}

/// Compensated dot product; keeps the finite-difference noise floor low.
fn neumaier_dot(a: &[f64], b: &[f64]) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for (x, y) in a.iter().zip(b) {
        let p = x * y;
        let e = x.mul_add(*y, -p);
        let t = sum + p;
        comp += if sum.abs() >= p.abs() { (sum - t) + p } else { (p - t) + sum } + e;
        sum = t;
    }
    sum + comp
}

fn pick_coords(numel: usize, max: Option<usize>, rng: &mut ChaCha8Rng) -> Vec<usize> {
    match max {
        Some(m) if m < numel => {
            let mut v = sample(rng, numel, m).into_vec();
            v.sort_unstable();
            v
        }
        _ => (0..numel).collect(),
    }
}

/// Random input of the given shape as drawn by [`grad_check`] for `seed`.
pub fn grad_check_input(input_shape: &[usize], seed: u64, opts: &GradCheckOptions) -> Tensor {
    Tensor::randn(input_shape, opts.input_std, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Checks input and parameter gradients of `block` on a random input.
pub fn grad_check<F>(
    store: &ParamStore,
    input_shape: &[usize],
    seed: u64,
    opts: &GradCheckOptions,
    block: F,
) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&Ctx<'t>, Var<'t>) -> Result<Var<'t>>,
{
    grad_check_at(store, &grad_check_input(input_shape, seed, opts), seed, opts, block)
}

/// Checks input and parameter gradients of `block` at the input `x`.
pub fn grad_check_at<F>(
    store: &ParamStore,
    x: &Tensor,
    seed: u64,
    opts: &GradCheckOptions,
    block: F,
) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&Ctx<'t>, Var<'t>) -> Result<Var<'t>>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let x = x.clone();
    let input_shape = x.shape().to_vec();
    let input_shape = &input_shape[..];

    let tape = Tape::new();
    let cx = Ctx::new(&tape, store, opts.train);
    let xv = tape.leaf(x.clone(), true);
    let out = block(&cx, xv)?;
    let w = Tensor::randn(&out.shape(), 1.0, &mut rng);
    let loss = weighted_sum(out, &w)?;
    let mut grads = tape.backward(loss)?;
    let gx = grads
        .take(xv)
        .unwrap_or_else(|| Tensor::zeros(input_shape));
    let pgrads = cx.param_grads(&mut grads);

    let mut tensors = Vec::new();
    let check = |name: &str, analytic: &Tensor, eval: &mut dyn FnMut(usize, f64) -> Result<f64>, rng: &mut ChaCha8Rng| -> Result<TensorError> {
        if !analytic.all_finite() {
            return Err(Error::NonFinite(format!("analytic gradient of {name}")));
        }
        let coords = pick_coords(analytic.numel(), opts.max_coords, rng);
        let mut worst = 0.0f64;
        for &i in &coords {
            let plus = eval(i, opts.step)?;
            let minus = eval(i, -opts.step)?;
            let numeric = (plus - minus) / (2.0 * opts.step);
            if !numeric.is_finite() {
                return Err(Error::NonFinite(format!("numeric gradient of {name}[{i}]")));
            }
            worst = worst.max(relative_error(analytic.data()[i], numeric));
        }
        Ok(TensorError {
            name: name.to_string(),
            max_rel_error: worst,
            coords_checked: coords.len(),
        })
    };

    let mut eval_input = |i: usize, h: f64| {
        let mut xp = x.clone();
        xp.data_mut()[i] += h;
        loss_value(store, &xp, &w, opts.train, &block)
    };
    tensors.push(check("input", &gx, &mut eval_input, &mut rng)?);

    let trainable: Vec<(String, Tensor)> = store
        .iter()
        .filter(|(_, p)| p.trainable())
        .map(|(n, p)| (n.clone(), p.tensor.clone()))
        .collect();
    for (name, value) in trainable {
        let analytic = pgrads
            .get(&name)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(value.shape()));
        let mut perturbed = store.clone();
        let mut eval_param = |i: usize, h: f64| {
            let mut t = value.clone();
            t.data_mut()[i] += h;
            *perturbed.get_mut(&name)? = t;
            loss_value(&perturbed, &x, &w, opts.train, &block)
        };
        tensors.push(check(&name, &analytic, &mut eval_param, &mut rng)?);
    }

    let worst = tensors
        .iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .expect("input tensor is always checked");
    Ok(GradCheckReport {
        max_rel_error: worst.max_rel_error,
        worst_tensor: worst.name.clone(),
        tensors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_uses_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
        assert!((relative_error(1e-12, 0.0) - 1e-4).abs() < 1e-12);
    }
}
