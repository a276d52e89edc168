//! Contextual attention with multi-scale feature fusion (CAMF) and the units
//! that chain inside a C2f block.

use crate::attention::Cbam;
use crate::backbone::repvit::RepVitBranchSet;
use crate::error::Result;
use crate::nnkit::conv::{conv2d, ConvGeom, ConvSpec};
use crate::nnkit::layers::{Act, Conv};
use crate::nnkit::ops;
use crate::nnkit::params::{join, Ctx, ParamInit, ParamStore};
use crate::nnkit::tape::Var;

pub const MSC_KERNELS: [usize; 3] = [3, 5, 7];

/// Parallel depthwise convolutions at several kernel sizes, summed and
/// mixed by a 1×1 convolution.
#[derive(Clone, Debug)]
pub struct MultiScaleContext {
    pub prefix: String,
    pub channels: usize,
    pub kernels: Vec<usize>,
    pub mixer: Conv,
}

impl MultiScaleContext {
    pub fn new(init: &mut ParamInit<'_>, prefix: &str, channels: usize, kernels: &[usize]) -> Result<Self> {
        for &k in kernels {
            init.weight(&join(prefix, &format!("dw{k}.weight")), &[channels, 1, k, k], k * k);
            init.bias(&join(prefix, &format!("dw{k}.bias")), channels, k * k);
        }
        let mixer = Conv::new(init, &join(prefix, "mixer"), ConvSpec::new(channels, channels, 1), None)?;
        Ok(MultiScaleContext {
            prefix: prefix.to_string(),
            channels,
            kernels: kernels.to_vec(),
            mixer,
        })
    }

    /// Sum of the depthwise branches, before the mixer.
    pub fn branch_sum<'t>(&self, cx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let mut acc: Option<Var<'t>> = None;
        for &k in &self.kernels {
            let geom = ConvGeom {
                stride: 1,
                pad: (k - 1) / 2,
                dilation: 1,
                groups: self.channels,
            };
            let y = conv2d(
                x,
                cx.param(&join(&self.prefix, &format!("dw{k}.weight")))?,
                Some(cx.param(&join(&self.prefix, &format!("dw{k}.bias")))?),
                geom,
            )?;
            acc = Some(match acc {
                Some(a) => ops::add(a, y)?,
                None => y,
            });
        }
        Ok(acc.expect("at least one kernel"))
    }

    pub fn forward<'t>(&self, cx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let s = self.branch_sum(cx, x)?;
        self.mixer.forward(cx, s)
    }
}

/// Channel gate and spatial gate followed by a 1×1 mixing convolution.
#[derive(Clone, Debug)]
pub struct ContextFusion {
    pub gates: Cbam,
    pub mixer: Conv,
}

impl ContextFusion {
    pub fn new(init: &mut ParamInit<'_>, prefix: &str, channels: usize, reduction: usize) -> Result<Self> {
        let gates = Cbam::new(init, &join(prefix, "gates"), channels, reduction)?;
        let mixer = Conv::new(init, &join(prefix, "mixer"), ConvSpec::new(channels, channels, 1), None)?;
        Ok(ContextFusion { gates, mixer })
    }

    pub fn forward<'t>(&self, cx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let g = self.gates.forward(cx, x)?;
        self.mixer.forward(cx, g)
    }
}

/// RepViT mixer, then (optionally) multi-scale context and context fusion,
/// with a residual connection around the whole unit.
#[derive(Clone, Debug)]
pub struct RepVitCamfUnit {
    pub repvit: RepVitBranchSet,
    pub camf: Option<(MultiScaleContext, ContextFusion)>,
    pub shortcut: bool,
}

impl RepVitCamfUnit {
    pub fn new(
        init: &mut ParamInit<'_>,
        prefix: &str,
        channels: usize,
        use_camf: bool,
        reduction: usize,
    ) -> Result<Self> {
        let repvit = RepVitBranchSet::new(init, &join(prefix, "repvit"), channels)?;
        let camf = if use_camf {
            Some((
                MultiScaleContext::new(init, &join(prefix, "msc"), channels, &MSC_KERNELS)?,
                ContextFusion::new(init, &join(prefix, "fusion"), channels, reduction)?,
            ))
        } else {
            None
        };
        Ok(RepVitCamfUnit {
            repvit,
            camf,
            shortcut: true,
        })
    }

    pub fn forward<'t>(&self, cx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let mut y = self.repvit.forward(cx, x)?;
        if let Some((msc, fusion)) = &self.camf {
            y = msc.forward(cx, y)?;
            y = fusion.forward(cx, y)?;
        }
        if self.shortcut {
            ops::add(x, y)
        } else {
            Ok(y)
        }
    }

    pub fn fuse(&mut self, store: &mut ParamStore) -> Result<()> {
        self.repvit.fuse(store)
    }
}

/// Two 3×3 Conv-BN-SiLU layers with a residual, the stock C2f bottleneck.
#[derive(Clone, Debug)]
pub struct PlainBottleneck {
    pub cv1: Conv,
    pub cv2: Conv,
    pub shortcut: bool,
}

impl PlainBottleneck {
    pub fn new(init: &mut ParamInit<'_>, prefix: &str, channels: usize, shortcut: bool) -> Result<Self> {
        let spec = ConvSpec::new(channels, channels, 3).with_bn();
        Ok(PlainBottleneck {
            cv1: Conv::new(init, &join(prefix, "cv1"), spec, Some(Act::Silu))?,
            cv2: Conv::new(init, &join(prefix, "cv2"), spec, Some(Act::Silu))?,
            shortcut,
        })
    }

    pub fn forward<'t>(&self, cx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let y = self.cv2.forward(cx, self.cv1.forward(cx, x)?)?;
        if self.shortcut {
            ops::add(x, y)
        } else {
            Ok(y)
        }
    }
}
