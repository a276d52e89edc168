//! Per-channel batch normalization.

use crate::error::{Error, Result};
use crate::nnkit::tape::Var;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Batch statistics observed in train mode.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, the value folded into running statistics.
    pub var_unbiased: Vec<f64>,
}

impl BatchStats {
    /// Running-statistic update with momentum [`BN_MOMENTUM`].
    pub fn update_running(&self, running_mean: &mut [f64], running_var: &mut [f64]) {
        for c in 0..self.mean.len() {
            running_mean[c] = (1.0 - BN_MOMENTUM) * running_mean[c] + BN_MOMENTUM * self.mean[c];
            running_var[c] = (1.0 - BN_MOMENTUM) * running_var[c] + BN_MOMENTUM * self.var_unbiased[c];
        }
    }
}

fn check_affine(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<(usize, usize, usize)> {
    let (n, c, h, w) = x.dims4()?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape(format!(
            "batch norm over {c} channels with gamma {:?}, beta {:?}",
            gamma.shape(),
            beta.shape()
        )));
    }
    Ok((n, c, h * w))
}

/// Train-mode batch norm using the statistics of `x` itself.
pub fn batchnorm_train<'t>(x: Var<'t>, gamma: Var<'t>, beta: Var<'t>) -> Result<(Var<'t>, BatchStats)> {
    let xv = x.value();
    let gv = gamma.value();
    let bv = beta.value();
    let (n, c, hw) = check_affine(&xv, &gv, &bv)?;
    let m = n * hw;
    if m < 2 {
        return Err(Error::InsufficientStatistics);
    }
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for b in 0..n {
            s += xv.data()[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().sum::<f64>();
        }
        let mu = s / m as f64;
        let mut ss = 0.0;
        for b in 0..n {
            ss += xv.data()[(b * c + ch) * hw..(b * c + ch + 1) * hw]
                .iter()
                .map(|v| (v - mu) * (v - mu))
                .sum::<f64>();
        }
        mean[ch] = mu;
        var[ch] = ss / m as f64;
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut xhat = Tensor::zeros(xv.shape());
    let mut y = Tensor::zeros(xv.shape());
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * hw;
            for i in base..base + hw {
                let xh = (xv.data()[i] - mean[ch]) * inv_std[ch];
                xhat.data_mut()[i] = xh;
                y.data_mut()[i] = gv.data()[ch] * xh + bv.data()[ch];
            }
        }
    }
    let stats = BatchStats {
        mean,
        var_unbiased: var.iter().map(|v| v * m as f64 / (m - 1) as f64).collect(),
    };
    let out = x.tape().push(
        y,
        &[x, gamma, beta],
        Box::new(move |g, _| {
            let mut gx = Tensor::zeros(xhat.shape());
            let mut gg = Tensor::zeros(&[c]);
            let mut gb = Tensor::zeros(&[c]);
            let mf = m as f64;
            for ch in 0..c {
                let (mut sum_g, mut sum_gx) = (0.0, 0.0);
                for b in 0..n {
                    let base = (b * c + ch) * hw;
                    for i in base..base + hw {
                        sum_g += g.data()[i];
                        sum_gx += g.data()[i] * xhat.data()[i];
                    }
                }
                gg.data_mut()[ch] = sum_gx;
                gb.data_mut()[ch] = sum_g;
                let k = gv.data()[ch] * inv_std[ch] / mf;
                for b in 0..n {
                    let base = (b * c + ch) * hw;
                    for i in base..base + hw {
                        gx.data_mut()[i] = k * (mf * g.data()[i] - sum_g - xhat.data()[i] * sum_gx);
                    }
                }
            }
            vec![Some(gx), Some(gg), Some(gb)]
        }),
    );
    Ok((out, stats))
}

/// Eval-mode batch norm with fixed running statistics.
pub fn batchnorm_eval<'t>(
    x: Var<'t>,
    gamma: Var<'t>,
    beta: Var<'t>,
    running_mean: &Tensor,
    running_var: &Tensor,
) -> Result<Var<'t>> {
    let xv = x.value();
    let gv = gamma.value();
    let bv = beta.value();
    let (n, c, hw) = check_affine(&xv, &gv, &bv)?;
    if running_mean.shape() != [c] || running_var.shape() != [c] {
        return Err(Error::shape("running statistics do not match channel count"));
    }
    let inv_std: Vec<f64> = running_var.data().iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mean = running_mean.data().to_vec();
    let mut y = Tensor::zeros(xv.shape());
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * hw;
            for i in base..base + hw {
                y.data_mut()[i] = gv.data()[ch] * (xv.data()[i] - mean[ch]) * inv_std[ch] + bv.data()[ch];
            }
        }
    }
    Ok(x.tape().push(
        y,
        &[x, gamma, beta],
        Box::new(move |g, _| {
            let mut gx = Tensor::zeros(xv.shape());
            let mut gg = Tensor::zeros(&[c]);
            let mut gb = Tensor::zeros(&[c]);
            for b in 0..n {
                for ch in 0..c {
                    let base = (b * c + ch) * hw;
                    for i in base..base + hw {
                        let xh = (xv.data()[i] - mean[ch]) * inv_std[ch];
                        gx.data_mut()[i] = g.data()[i] * gv.data()[ch] * inv_std[ch];
                        gg.data_mut()[ch] += g.data()[i] * xh;
                        gb.data_mut()[ch] += g.data()[i];
                    }
                }
            }
            vec![Some(gx), Some(gg), Some(gb)]
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnkit::tape::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn eval_with_unit_stats_is_identity() {
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[2, 3, 4, 4], 1.0, &mut rng);
        let xv = tape.constant(x.clone());
        let g = tape.constant(Tensor::ones(&[3]));
        let b = tape.constant(Tensor::zeros(&[3]));
        let y = batchnorm_eval(xv, g, b, &Tensor::zeros(&[3]), &Tensor::ones(&[3])).unwrap();
        let scale = 1.0 / (1.0 + BN_EPS).sqrt();
        assert!(y.value().max_abs_diff(&x.scale(scale)).unwrap() < 1e-15);
        assert!(y.value().max_abs_diff(&x).unwrap() < 1e-4);
    }

    #[test]
    fn train_mode_normalizes_each_channel() {
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(&[4, 3, 5, 5], 3.0, &mut rng).map(|v| v + 7.0);
        let xv = tape.constant(x);
        let g = tape.constant(Tensor::ones(&[3]));
        let b = tape.constant(Tensor::zeros(&[3]));
        let (y, stats) = batchnorm_train(xv, g, b).unwrap();
        let y = y.value();
        for ch in 0..3 {
            let vals: Vec<f64> = (0..4)
                .flat_map(|n| y.data()[(n * 3 + ch) * 25..(n * 3 + ch + 1) * 25].to_vec())
                .collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-6);
            assert!((v - 1.0).abs() < 1e-5, "variance {v}");
            assert!((stats.mean[ch] - 7.0).abs() < 1.5);
        }
    }

    #[test]
    fn single_value_per_channel_is_rejected() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[1, 2, 1, 1]));
        let g = tape.constant(Tensor::ones(&[2]));
        let b = tape.constant(Tensor::zeros(&[2]));
        assert!(matches!(batchnorm_train(x, g, b), Err(Error::InsufficientStatistics)));
    }

    #[test]
    fn running_update_uses_momentum() {
        let stats = BatchStats {
            mean: vec![1.0],
            var_unbiased: vec![3.0],
        };
        let (mut m, mut v) = (vec![0.0], vec![1.0]);
        stats.update_running(&mut m, &mut v);
        assert!((m[0] - 0.1).abs() < 1e-15);
        assert!((v[0] - 1.2).abs() < 1e-15);
    }
}
