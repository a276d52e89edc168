use serde::{Deserialize, Serialize};

use crate::attention::Psa;
use crate::backbone::c2f::{BlockConfig, C2fBlock};
use crate::error::{Error, Result};
use crate::nnkit::conv::ConvSpec;
use crate::nnkit::layers::{Act, Conv};
use crate::nnkit::params::{join, Ctx, ParamInit, ParamStore};
use crate::nnkit::tape::Var;

const BASE_WIDTHS: [usize; 5] = [64, 128, 256, 512, 1024];
const BASE_DEPTHS: [usize; 4] = [3, 6, 6, 3];

/// Rounds `base * mult` to a multiple of 8, at least 8.
pub fn scale_width(base: usize, mult: f64) -> usize {
    let v = (base as f64 * mult / 8.0).round() as usize * 8;
    v.max(8)
}

pub fn scale_depth(base: usize, mult: f64) -> usize {
    ((base as f64 * mult).round() as usize).max(1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub width_mult: f64,
    pub depth_mult: f64,
    pub use_c2f_repvitcamf: bool,
    pub reduction: usize,
}

impl BackboneConfig {
    pub fn widths(&self) -> [usize; 5] {
        BASE_WIDTHS.map(|b| scale_width(b, self.width_mult))
    }

    pub fn depths(&self) -> [usize; 4] {
        BASE_DEPTHS.map(|d| scale_depth(d, self.depth_mult))
    }

    /// Channel counts of P3, P4, P5.
    pub fn pyramid_channels(&self) -> [usize; 3] {
        let w = self.widths();
        [w[2], w[3], w[4]]
    }
}

/// Three feature levels at strides 8, 16 and 32.
#[derive(Clone, Copy, Debug)]
pub struct Pyramid<'t> {
    pub p3: Var<'t>,
    pub p4: Var<'t>,
    pub p5: Var<'t>,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    pub stem: Conv,
    pub downs: Vec<Conv>,
    pub blocks: Vec<C2fBlock>,
    pub psa: Psa,
}

impl Backbone {
    pub fn new(init: &mut ParamInit<'_>, prefix: &str, cfg: BackboneConfig) -> Result<Self> {
        let w = cfg.widths();
        let d = cfg.depths();
        let stem = Conv::new(
            init,
            &join(prefix, "stem"),
            ConvSpec::new(cfg.in_channels, w[0], 3).stride(2).with_bn(),
            Some(Act::Silu),
        )?;
        let mut downs = Vec::new();
        let mut blocks = Vec::new();
        for s in 0..4 {
            downs.push(Conv::new(
                init,
                &join(prefix, &format!("stage{s}.down")),
                ConvSpec::new(w[s], w[s + 1], 3).stride(2).with_bn(),
                Some(Act::Silu),
            )?);
            let mut bc = BlockConfig::new(w[s + 1], d[s]);
            bc.use_repvit = cfg.use_c2f_repvitcamf;
            bc.reduction = cfg.reduction;
            blocks.push(C2fBlock::new(init, &join(prefix, &format!("stage{s}.c2f")), w[s + 1], bc)?);
        }
        let psa = Psa::new(init, &join(prefix, "psa"), w[4]);
        Ok(Backbone {
            cfg,
            stem,
            downs,
            blocks,
            psa,
        })
    }

    pub fn forward<'t>(&self, cx: &Ctx<'t>, x: Var<'t>) -> Result<Pyramid<'t>> {
        let (_, c, h, w) = x.value().dims4()?;
        if c != self.cfg.in_channels {
            return Err(Error::shape(format!(
                "backbone expects {} input channels, got {c}",
                self.cfg.in_channels
            )));
        }
        if h % 32 != 0 || w % 32 != 0 || h == 0 || w == 0 {
            return Err(Error::shape(format!("input {h}×{w} is not divisible by 32")));
        }
        let mut y = self.stem.forward(cx, x)?;
        let mut outs = Vec::with_capacity(3);
        for s in 0..4 {
            y = self.downs[s].forward(cx, y)?;
            y = self.blocks[s].forward(cx, y)?;
            if s == 3 {
                y = self.psa.forward(cx, y)?;
            }
            if s >= 1 {
                outs.push(y);
            }
        }
        Ok(Pyramid {
            p3: outs[0],
            p4: outs[1],
            p5: outs[2],
        })
    }

    /// Fuses every RepViT unit; returns how many were fused.
    pub fn fuse(&mut self, store: &mut ParamStore) -> Result<usize> {
        let mut n = 0;
        for b in &mut self.blocks {
            n += b.fuse(store)?;
        }
        Ok(n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_scale_widths_and_depths() {
        let cfg = BackboneConfig {
            in_channels: 1,
            width_mult: 0.25,
            depth_mult: 0.33,
            use_c2f_repvitcamf: true,
            reduction: 4,
        };
        assert_eq!(cfg.widths(), [16, 32, 64, 128, 256]);
        assert_eq!(cfg.depths(), [1, 2, 2, 1]);
    }
}
