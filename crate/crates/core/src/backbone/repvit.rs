//! RepViT token mixer with structural reparameterization.
//!
//! Training mode sums three depthwise branches (3×3 conv + BN, 1×1 conv + BN
//! and a BN-only identity), applies SiLU and a pointwise 1×1 channel mixer.
//! [`RepVitBranchSet::fuse`] folds every BN into its convolution and merges
//! the branches into one depthwise 3×3 kernel with bias.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nnkit::conv::{conv2d, ConvGeom, ConvSpec};
use crate::nnkit::layers::{BatchNorm, Conv};
use crate::nnkit::norm::BN_EPS;
use crate::nnkit::ops;
use crate::nnkit::params::{join, Ctx, ParamInit, ParamKind, ParamStore};
use crate::nnkit::tape::Var;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchMode {
    Training,
    Fused,
}

#[derive(Clone, Debug)]
pub struct RepVitBranchSet {
    pub prefix: String,
    pub channels: usize,
    pub mode: BranchMode,
    pub pointwise: Conv,
}

impl RepVitBranchSet {
    pub fn new(init: &mut ParamInit<'_>, prefix: &str, channels: usize) -> Result<Self> {
        init.weight(&join(prefix, "dw3.weight"), &[channels, 1, 3, 3], 9);
        BatchNorm::new(init, &join(prefix, "dw3.bn"), channels);
        init.weight(&join(prefix, "dw1.weight"), &[channels, 1, 1, 1], 1);
        BatchNorm::new(init, &join(prefix, "dw1.bn"), channels);
        BatchNorm::new(init, &join(prefix, "identity_bn"), channels);
        let pointwise = Conv::new(
            init,
            &join(prefix, "pw"),
            ConvSpec::new(channels, channels, 1).with_bn(),
            None,
        )?;
        Ok(RepVitBranchSet {
            prefix: prefix.to_string(),
            channels,
            mode: BranchMode::Training,
            pointwise,
        })
    }

    fn p(&self, name: &str) -> String {
        join(&self.prefix, name)
    }

    fn bn(&self, name: &str) -> BatchNorm {
        BatchNorm {
            prefix: self.p(name),
            channels: self.channels,
        }
    }

    fn dw_geom(&self, kernel: usize) -> ConvGeom {
        ConvGeom {
            stride: 1,
            pad: (kernel - 1) / 2,
            dilation: 1,
            groups: self.channels,
        }
    }

    /// The individual training-mode branch outputs, before summation.
    pub fn branch_outputs<'t>(&self, cx: &Ctx<'t>, x: Var<'t>) -> Result<Vec<Var<'t>>> {
        if self.mode == BranchMode::Fused {
            return Err(Error::AlreadyFused);
        }
        let b3 = conv2d(x, cx.param(&self.p("dw3.weight"))?, None, self.dw_geom(3))?;
        let b3 = self.bn("dw3.bn").forward(cx, b3)?;
        let b1 = conv2d(x, cx.param(&self.p("dw1.weight"))?, None, self.dw_geom(1))?;
        let b1 = self.bn("dw1.bn").forward(cx, b1)?;
        let id = self.bn("identity_bn").forward(cx, x)?;
        Ok(vec![b3, b1, id])
    }

    /// Output of the spatial (depthwise) mixer, before the activation.
    pub fn token_mix<'t>(&self, cx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        match self.mode {
            BranchMode::Training => {
                let b = self.branch_outputs(cx, x)?;
                ops::add(ops::add(b[0], b[1])?, b[2])
            }
            BranchMode::Fused => conv2d(
                x,
                cx.param(&self.p("fused.weight"))?,
                Some(cx.param(&self.p("fused.bias"))?),
                self.dw_geom(3),
            ),
        }
    }

    pub fn forward<'t>(&self, cx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let mixed = self.token_mix(cx, x)?;
        self.pointwise.forward(cx, ops::silu(mixed))
    }

    /// Folds the branches into one depthwise 3×3 convolution.
    pub fn fuse(&mut self, store: &mut ParamStore) -> Result<()> {
        if self.mode == BranchMode::Fused {
            return Err(Error::AlreadyFused);
        }
        let c = self.channels;
        let (kernel, bias) = fused_kernel(store, &self.prefix, c)?;
        for name in [
            "dw3.weight",
            "dw3.bn.weight",
            "dw3.bn.bias",
            "dw3.bn.running_mean",
            "dw3.bn.running_var",
            "dw1.weight",
            "dw1.bn.weight",
            "dw1.bn.bias",
            "dw1.bn.running_mean",
            "dw1.bn.running_var",
            "identity_bn.weight",
            "identity_bn.bias",
            "identity_bn.running_mean",
            "identity_bn.running_var",
        ] {
            store.remove(&self.p(name));
        }
        store.insert(self.p("fused.weight"), kernel, ParamKind::Weight);
        store.insert(self.p("fused.bias"), bias, ParamKind::Bias);
        self.mode = BranchMode::Fused;
        Ok(())
    }

    /// Fused parameter names for a given prefix, used when rebuilding a
    /// fused model from a checkpoint.
    pub fn init_fused(init: &mut ParamInit<'_>, prefix: &str, channels: usize) -> Result<Self> {
        let mut set = Self::new(init, prefix, channels)?;
        set.fuse(init.store)?;
        Ok(set)
    }
}

/// `(scale, shift)` such that `BN(y) = scale · y + shift` in eval mode.
pub fn bn_fold(store: &ParamStore, prefix: &str) -> Result<(Vec<f64>, Vec<f64>)> {
    let gamma = store.get(&join(prefix, "weight"))?;
    let beta = store.get(&join(prefix, "bias"))?;
    let mean = store.get(&join(prefix, "running_mean"))?;
    let var = store.get(&join(prefix, "running_var"))?;
    let scale: Vec<f64> = gamma
        .data()
        .iter()
        .zip(var.data())
        .map(|(g, v)| g / (v + BN_EPS).sqrt())
        .collect();
    let shift = beta
        .data()
        .iter()
        .zip(mean.data())
        .zip(&scale)
        .map(|((b, m), s)| b - m * s)
        .collect();
    Ok((scale, shift))
}

/// Equivalent depthwise 3×3 kernel and bias of the three branches.
pub fn fused_kernel(store: &ParamStore, prefix: &str, channels: usize) -> Result<(Tensor, Tensor)> {
    let w3 = store.get(&join(prefix, "dw3.weight"))?;
    let w1 = store.get(&join(prefix, "dw1.weight"))?;
    let (s3, t3) = bn_fold(store, &join(prefix, "dw3.bn"))?;
    let (s1, t1) = bn_fold(store, &join(prefix, "dw1.bn"))?;
    let (si, ti) = bn_fold(store, &join(prefix, "identity_bn"))?;
    let mut kernel = Tensor::zeros(&[channels, 1, 3, 3]);
    let mut bias = Tensor::zeros(&[channels]);
    for c in 0..channels {
        let k = &mut kernel.data_mut()[c * 9..(c + 1) * 9];
        for (i, kv) in k.iter_mut().enumerate() {
            *kv = s3[c] * w3.data()[c * 9 + i];
        }
        // 1×1 and identity kernels zero-padded to 3×3: only the centre tap.
        k[4] += s1[c] * w1.data()[c] + si[c];
        bias.data_mut()[c] = t3[c] + t1[c] + ti[c];
    }
    Ok((kernel, bias))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_only_branch_fuses_to_delta() {
        let mut store = ParamStore::new();
        let mut set = RepVitBranchSet::new(&mut ParamInit::new(&mut store, 0), "r", 2).unwrap();
        // Silence the conv branches; identity BN keeps unit stats.
        store.set("r.dw3.weight", Tensor::zeros(&[2, 1, 3, 3])).unwrap();
        store.set("r.dw1.weight", Tensor::zeros(&[2, 1, 1, 1])).unwrap();
        let (k, b) = fused_kernel(&store, "r", 2).unwrap();
        let s = 1.0 / (1.0 + BN_EPS).sqrt();
        for c in 0..2 {
            for i in 0..9 {
                let expect = if i == 4 { s } else { 0.0 };
                assert_eq!(k.data()[c * 9 + i], expect);
            }
        }
        assert!(b.data().iter().all(|&v| v == 0.0));
        set.fuse(&mut store).unwrap();
        assert!(matches!(set.fuse(&mut store), Err(Error::AlreadyFused)));
    }
}
