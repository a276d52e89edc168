use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nnkit::conv::ConvSpec;
use crate::nnkit::layers::{Act, Conv};
use crate::nnkit::params::{join, Ctx, ParamInit};
use crate::nnkit::tape::Var;

pub const STRIDES: [usize; 3] = [8, 16, 32];
/// Box logits, objectness, then class logits.
pub const BOX_CHANNELS: usize = 4;
pub const OBJ_CHANNEL: usize = 4;
/// Initial objectness bias, a prior of about 2% per cell.
pub const OBJ_PRIOR_BIAS: f64 = -4.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub in_channels: [usize; 3],
    pub hidden: usize,
    pub num_classes: usize,
}

impl HeadConfig {
    pub fn out_channels(&self) -> usize {
        BOX_CHANNELS + 1 + self.num_classes
    }
}

#[derive(Clone, Debug)]
pub struct HeadBranch {
    pub cv1: Conv,
    pub cv2: Conv,
    pub pred: Conv,
}

/// Anchor-free head, one branch per stride.
#[derive(Clone, Debug)]
pub struct Head {
    pub cfg: HeadConfig,
    pub branches: Vec<HeadBranch>,
}

impl Head {
    pub fn new(init: &mut ParamInit<'_>, prefix: &str, cfg: HeadConfig) -> Result<Self> {
        if cfg.num_classes == 0 {
            return Err(Error::invalid("head needs at least one class"));
        }
        let mut branches = Vec::new();
        for (s, &c) in cfg.in_channels.iter().enumerate() {
            let p = |n: &str| join(prefix, &format!("s{s}.{n}"));
            let cv1 = Conv::new(init, &p("cv1"), ConvSpec::new(c, cfg.hidden, 3), Some(Act::Silu))?;
            let cv2 = Conv::new(init, &p("cv2"), ConvSpec::new(cfg.hidden, cfg.hidden, 3), Some(Act::Silu))?;
            let pred = Conv::new(init, &p("pred"), ConvSpec::new(cfg.hidden, cfg.out_channels(), 1), None)?;
            init.store.get_mut(&p("pred.bias"))?.data_mut()[OBJ_CHANNEL] = OBJ_PRIOR_BIAS;
            branches.push(HeadBranch { cv1, cv2, pred });
        }
        Ok(Head { cfg, branches })
    }

    /// Raw logits per stride, each N×(5+K)×Hs×Ws.
    pub fn forward<'t>(&self, cx: &Ctx<'t>, feats: &[Var<'t>; 3]) -> Result<Vec<Var<'t>>> {
        self.branches
            .iter()
            .zip(feats)
            .map(|(b, &f)| {
                let y = b.cv1.forward(cx, f)?;
                let y = b.cv2.forward(cx, y)?;
                b.pred.forward(cx, y)
            })
            .collect()
    }
}
