//! Convolutional block attention (channel gate then spatial gate) and the
//! per-pixel gate used after the last backbone stage.
//!
//! Channel gate: `M_c(F) = σ(MLP(AvgPool(F)) + MLP(MaxPool(F)))` with one MLP
//! `C → C/r → C` (ReLU hidden) shared by both pooled vectors.
//!
//! Spatial gate: `M_s(F) = σ(f7×7([mean_c(F); max_c(F)]))`, pooling along the
//! channel axis and a single 7×7 convolution from 2 planes to 1.

use crate::error::{Error, Result};
use crate::nnkit::conv::{conv2d, ConvGeom};
use crate::nnkit::ops;
use crate::nnkit::params::{join, Ctx, ParamInit};
use crate::nnkit::pool::{channel_max, channel_mean, global_avg_pool, global_max_pool};
use crate::nnkit::tape::Var;

pub const SPATIAL_KERNEL: usize = 7;

/// CBAM parameters: the shared MLP and the 7×7 spatial convolution.
#[derive(Clone, Debug)]
pub struct Cbam {
    pub prefix: String,
    pub channels: usize,
    pub reduction: usize,
}

impl Cbam {
    pub fn new(init: &mut ParamInit<'_>, prefix: &str, channels: usize, reduction: usize) -> Result<Self> {
        if reduction == 0 || channels % reduction != 0 {
            return Err(Error::invalid(format!(
                "reduction ratio {reduction} must divide {channels} channels"
            )));
        }
        let hidden = channels / reduction;
        init.weight(&join(prefix, "mlp.fc1.weight"), &[hidden, channels, 1, 1], channels);
        init.bias(&join(prefix, "mlp.fc1.bias"), hidden, channels);
        init.weight(&join(prefix, "mlp.fc2.weight"), &[channels, hidden, 1, 1], hidden);
        init.bias(&join(prefix, "mlp.fc2.bias"), channels, hidden);
        let fan = 2 * SPATIAL_KERNEL * SPATIAL_KERNEL;
        init.weight(&join(prefix, "spatial.weight"), &[1, 2, SPATIAL_KERNEL, SPATIAL_KERNEL], fan);
        init.bias(&join(prefix, "spatial.bias"), 1, fan);
        Ok(Cbam {
            prefix: prefix.to_string(),
            channels,
            reduction,
        })
    }

    pub fn hidden(&self) -> usize {
        self.channels / self.reduction
    }

    fn mlp<'t>(&self, cx: &Ctx<'t>, v: Var<'t>) -> Result<Var<'t>> {
        let p = |n: &str| cx.param(&join(&self.prefix, n));
        let h = conv2d(v, p("mlp.fc1.weight")?, Some(p("mlp.fc1.bias")?), ConvGeom::same(1))?;
        let h = ops::relu(h);
        conv2d(h, p("mlp.fc2.weight")?, Some(p("mlp.fc2.bias")?), ConvGeom::same(1))
    }

    /// Channel weights `M_c`, shape N×C×1×1, each in (0, 1).
    pub fn channel_attention<'t>(&self, cx: &Ctx<'t>, f: Var<'t>) -> Result<Var<'t>> {
        let (_, c, _, _) = f.value().dims4()?;
        if c != self.channels {
            return Err(Error::shape(format!(
                "channel attention built for {} channels, got {c}",
                self.channels
            )));
        }
        let avg = self.mlp(cx, global_avg_pool(f)?)?;
        let max = self.mlp(cx, global_max_pool(f)?)?;
        Ok(ops::sigmoid(ops::add(avg, max)?))
    }

    /// Spatial map `M_s`, shape N×1×H×W, each in (0, 1).
    pub fn spatial_attention<'t>(&self, cx: &Ctx<'t>, f: Var<'t>) -> Result<Var<'t>> {
        let pooled = ops::concat_channels(&[channel_mean(f)?, channel_max(f)?])?;
        let w = cx.param(&join(&self.prefix, "spatial.weight"))?;
        let b = cx.param(&join(&self.prefix, "spatial.bias"))?;
        let logits = conv2d(pooled, w, Some(b), ConvGeom::same(SPATIAL_KERNEL))?;
        Ok(ops::sigmoid(logits))
    }

    /// `F' = M_c(F) ⊙ F`, then `M_s(F') ⊙ F'`.
    pub fn forward<'t>(&self, cx: &Ctx<'t>, f: Var<'t>) -> Result<Var<'t>> {
        let mc = self.channel_attention(cx, f)?;
        let refined = ops::mul(f, mc)?;
        let ms = self.spatial_attention(cx, refined)?;
        ops::mul(refined, ms)
    }
}

/// Pixel-wise gate: `F ⊙ σ(conv1×1(F))` with a single output plane.
#[derive(Clone, Debug)]
pub struct Psa {
    pub prefix: String,
    pub channels: usize,
}

impl Psa {
    pub fn new(init: &mut ParamInit<'_>, prefix: &str, channels: usize) -> Self {
        init.weight(&join(prefix, "gate.weight"), &[1, channels, 1, 1], channels);
        init.bias(&join(prefix, "gate.bias"), 1, channels);
        Psa {
            prefix: prefix.to_string(),
            channels,
        }
    }

    pub fn gate<'t>(&self, cx: &Ctx<'t>, f: Var<'t>) -> Result<Var<'t>> {
        let w = cx.param(&join(&self.prefix, "gate.weight"))?;
        let b = cx.param(&join(&self.prefix, "gate.bias"))?;
        Ok(ops::sigmoid(conv2d(f, w, Some(b), ConvGeom::same(1))?))
    }

    pub fn forward<'t>(&self, cx: &Ctx<'t>, f: Var<'t>) -> Result<Var<'t>> {
        let g = self.gate(cx, f)?;
        ops::mul(f, g)
    }
}
