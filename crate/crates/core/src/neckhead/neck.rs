use serde::{Deserialize, Serialize};

use crate::attention::Cbam;
use crate::backbone::{PlainBottleneck, Pyramid};
use crate::error::{Error, Result};
use crate::kan::KanBottleneck;
use crate::nnkit::conv::ConvSpec;
use crate::nnkit::layers::{Act, Conv};
use crate::nnkit::ops;
use crate::nnkit::params::{join, Ctx, ParamInit};
use crate::nnkit::tape::Var;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeckConfig {
    /// Channel counts of P3, P4, P5; the outputs keep the same widths.
    pub channels: [usize; 3],
    pub use_mscaf: bool,
    pub use_kan_bottleneck: bool,
    pub reduction: usize,
}

#[derive(Clone, Debug)]
pub enum Mixer {
    Kan(KanBottleneck),
    Plain(PlainBottleneck),
}

impl Mixer {
    pub fn forward<'t>(&self, cx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        match self {
            Mixer::Kan(m) => m.forward(cx, x),
            Mixer::Plain(m) => m.forward(cx, x),
        }
    }
}

/// Post-concat fusion: 1×1 projection, residual bottleneck, optional CBAM.
#[derive(Clone, Debug)]
pub struct FusionBlock {
    pub proj: Conv,
    pub mixer: Mixer,
    pub cbam: Option<Cbam>,
}

impl FusionBlock {
    pub fn new(
        init: &mut ParamInit<'_>,
        prefix: &str,
        in_ch: usize,
        out_ch: usize,
        kan: bool,
        cbam: Option<usize>,
    ) -> Result<Self> {
        let proj = Conv::new(
            init,
            &join(prefix, "proj"),
            ConvSpec::new(in_ch, out_ch, 1).with_bn(),
            Some(Act::Silu),
        )?;
        let mixer = if kan {
            Mixer::Kan(KanBottleneck::new(init, &join(prefix, "mix"), out_ch, true)?)
        } else {
            Mixer::Plain(PlainBottleneck::new(init, &join(prefix, "mix"), out_ch, true)?)
        };
        let cbam = match cbam {
            Some(r) => Some(Cbam::new(init, &join(prefix, "cbam"), out_ch, r)?),
            None => None,
        };
        Ok(FusionBlock { proj, mixer, cbam })
    }

    /// Projection output, exposed for tests of the residual path.
    pub fn project<'t>(&self, cx: &Ctx<'t>, parts: &[Var<'t>]) -> Result<Var<'t>> {
        self.proj.forward(cx, ops::concat_channels(parts)?)
    }

    pub fn forward<'t>(&self, cx: &Ctx<'t>, parts: &[Var<'t>]) -> Result<Var<'t>> {
        let p = self.project(cx, parts)?;
        let m = self.mixer.forward(cx, p)?;
        match &self.cbam {
            Some(c) => c.forward(cx, m),
            None => Ok(m),
        }
    }
}

/// Top-down then bottom-up pyramid fusion with a CBAM closing each pathway.
#[derive(Clone, Debug)]
pub struct Neck {
    pub cfg: NeckConfig,
    pub td4: FusionBlock,
    pub td3: FusionBlock,
    pub down3: Conv,
    pub bu4: FusionBlock,
    pub down4: Conv,
    pub bu5: FusionBlock,
}

impl Neck {
    pub fn new(init: &mut ParamInit<'_>, prefix: &str, cfg: NeckConfig) -> Result<Self> {
        let [c3, c4, c5] = cfg.channels;
        let kan = cfg.use_kan_bottleneck;
        let gate = cfg.use_mscaf.then_some(cfg.reduction);
        let down = |init: &mut ParamInit<'_>, name: &str, c: usize| {
            Conv::new(
                init,
                &join(prefix, name),
                ConvSpec::new(c, c, 3).stride(2).with_bn(),
                Some(Act::Silu),
            )
        };
        let td4 = FusionBlock::new(init, &join(prefix, "td4"), c5 + c4, c4, kan, None)?;
        let td3 = FusionBlock::new(init, &join(prefix, "td3"), c4 + c3, c3, kan, gate)?;
        let down3 = down(init, "down3", c3)?;
        let bu4 = FusionBlock::new(init, &join(prefix, "bu4"), c3 + c4, c4, kan, None)?;
        let down4 = down(init, "down4", c4)?;
        let bu5 = FusionBlock::new(init, &join(prefix, "bu5"), c4 + c5, c5, kan, gate)?;
        Ok(Neck {
            cfg,
            td4,
            td3,
            down3,
            bu4,
            down4,
            bu5,
        })
    }

    pub fn forward<'t>(&self, cx: &Ctx<'t>, p: &Pyramid<'t>) -> Result<[Var<'t>; 3]> {
        let s3 = p.p3.value().dims4()?;
        let s4 = p.p4.value().dims4()?;
        let s5 = p.p5.value().dims4()?;
        let [c3, c4, c5] = self.cfg.channels;
        if (s3.1, s4.1, s5.1) != (c3, c4, c5) {
            return Err(Error::shape(format!(
                "pyramid channels ({}, {}, {}) do not match neck ({c3}, {c4}, {c5})",
                s3.1, s4.1, s5.1
            )));
        }
        if (s3.2, s3.3) != (2 * s4.2, 2 * s4.3) || (s4.2, s4.3) != (2 * s5.2, 2 * s5.3) {
            return Err(Error::shape(format!(
                "pyramid sizes {}×{}, {}×{}, {}×{} are not successive halvings",
                s3.2, s3.3, s4.2, s4.3, s5.2, s5.3
            )));
        }
        let t4 = self.td4.forward(cx, &[ops::upsample_nearest2x(p.p5)?, p.p4])?;
        let n3 = self.td3.forward(cx, &[ops::upsample_nearest2x(t4)?, p.p3])?;
        let n4 = self.bu4.forward(cx, &[self.down3.forward(cx, n3)?, t4])?;
        let n5 = self.bu5.forward(cx, &[self.down4.forward(cx, n4)?, p.p5])?;
        Ok([n3, n4, n5])
    }
}
