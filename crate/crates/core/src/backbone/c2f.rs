use serde::{Deserialize, Serialize};

use crate::backbone::camf::{PlainBottleneck, RepVitCamfUnit, MSC_KERNELS};
use crate::error::{Error, Result};
use crate::nnkit::conv::ConvSpec;
use crate::nnkit::layers::{Act, Conv};
use crate::nnkit::ops;
use crate::nnkit::params::{join, Ctx, ParamInit, ParamStore};
use crate::nnkit::tape::Var;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub channels: usize,
    pub n_bottlenecks: usize,
    pub split_ratio: f64,
    pub msc_kernels: Vec<usize>,
    pub use_camf: bool,
    /// RepViTCAMF units when true, stock conv bottlenecks otherwise.
    pub use_repvit: bool,
    pub reduction: usize,
}

impl BlockConfig {
    pub fn new(channels: usize, n_bottlenecks: usize) -> Self {
        BlockConfig {
            channels,
            n_bottlenecks,
            split_ratio: 0.5,
            msc_kernels: MSC_KERNELS.to_vec(),
            use_camf: true,
            use_repvit: true,
            reduction: 4,
        }
    }
}

#[derive(Clone, Debug)]
pub enum Unit {
    RepVitCamf(RepVitCamfUnit),
    Plain(PlainBottleneck),
}

impl Unit {
    pub fn forward<'t>(&self, cx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        match self {
            Unit::RepVitCamf(u) => u.forward(cx, x),
            Unit::Plain(u) => u.forward(cx, x),
        }
    }
}

/// Cascaded split/bottleneck/concat block.
#[derive(Clone, Debug)]
pub struct C2fBlock {
    pub cfg: BlockConfig,
    pub expand: Conv,
    pub units: Vec<Unit>,
    pub squeeze: Conv,
}

impl C2fBlock {
    pub fn new(init: &mut ParamInit<'_>, prefix: &str, in_ch: usize, cfg: BlockConfig) -> Result<Self> {
        if cfg.channels < 2 || cfg.channels % 2 != 0 {
            return Err(Error::invalid(format!(
                "C2f block needs an even channel count, got {}",
                cfg.channels
            )));
        }
        let hidden = cfg.channels / 2;
        let expand = Conv::new(
            init,
            &join(prefix, "expand"),
            ConvSpec::new(in_ch, 2 * hidden, 1).with_bn(),
            Some(Act::Silu),
        )?;
        let mut units = Vec::with_capacity(cfg.n_bottlenecks);
        for i in 0..cfg.n_bottlenecks {
            let p = join(prefix, &format!("m{i}"));
            units.push(if cfg.use_repvit {
                Unit::RepVitCamf(RepVitCamfUnit::new(init, &p, hidden, cfg.use_camf, cfg.reduction)?)
            } else {
                Unit::Plain(PlainBottleneck::new(init, &p, hidden, true)?)
            });
        }
        let squeeze = Conv::new(
            init,
            &join(prefix, "squeeze"),
            ConvSpec::new((2 + cfg.n_bottlenecks) * hidden, cfg.channels, 1).with_bn(),
            Some(Act::Silu),
        )?;
        Ok(C2fBlock {
            cfg,
            expand,
            units,
            squeeze,
        })
    }

    pub fn forward<'t>(&self, cx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let hidden = self.cfg.channels / 2;
        let e = self.expand.forward(cx, x)?;
        let mut parts = vec![ops::slice_channels(e, 0, hidden)?, ops::slice_channels(e, hidden, hidden)?];
        for unit in &self.units {
            let last = *parts.last().expect("two halves");
            parts.push(unit.forward(cx, last)?);
        }
        let cat = ops::concat_channels(&parts)?;
        self.squeeze.forward(cx, cat)
    }

    /// Reparameterizes every RepViT unit; returns how many were fused.
    pub fn fuse(&mut self, store: &mut ParamStore) -> Result<usize> {
        let mut n = 0;
        for unit in &mut self.units {
            if let Unit::RepVitCamf(u) = unit {
                u.fuse(store)?;
                n += 1;
            }
        }
        Ok(n)
    }
}
