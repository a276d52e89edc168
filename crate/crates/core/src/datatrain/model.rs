use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, BlockCost};
use crate::error::Result;
use crate::neckhead::{postprocess, Detection, Head, HeadConfig, Neck, NeckConfig, NmsConfig};
use crate::nnkit::params::{Ctx, ParamInit, ParamStore};
use crate::nnkit::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub width_mult: f64,
    pub depth_mult: f64,
    pub use_c2f_repvitcamf: bool,
    pub use_mscaf: bool,
    pub use_kan_bottleneck: bool,
    pub num_classes: usize,
    pub reduction: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 1,
            width_mult: 0.25,
            depth_mult: 0.33,
            use_c2f_repvitcamf: true,
            use_mscaf: true,
            use_kan_bottleneck: true,
            num_classes: 1,
            reduction: 4,
        }
    }
}

impl ModelConfig {
    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig {
            in_channels: self.in_channels,
            width_mult: self.width_mult,
            depth_mult: self.depth_mult,
            use_c2f_repvitcamf: self.use_c2f_repvitcamf,
            reduction: self.reduction,
        }
    }
}

/// Backbone, fusion neck and head under the prefixes `backbone`, `neck`, `head`.
#[derive(Clone, Debug)]
pub struct Detector {
    pub cfg: ModelConfig,
    pub backbone: Backbone,
    pub neck: Neck,
    pub head: Head,
}

impl Detector {
    pub fn new(store: &mut ParamStore, seed: u64, cfg: ModelConfig) -> Result<Self> {
        let mut init = ParamInit::new(store, seed);
        let bcfg = cfg.backbone();
        let channels = bcfg.pyramid_channels();
        let backbone = Backbone::new(&mut init, "backbone", bcfg)?;
        let neck = Neck::new(
            &mut init,
            "neck",
            NeckConfig {
                channels,
                use_mscaf: cfg.use_mscaf,
                use_kan_bottleneck: cfg.use_kan_bottleneck,
                reduction: cfg.reduction,
            },
        )?;
        let head = Head::new(
            &mut init,
            "head",
            HeadConfig {
                in_channels: channels,
                hidden: channels[0],
                num_classes: cfg.num_classes,
            },
        )?;
        Ok(Detector {
            cfg,
            backbone,
            neck,
            head,
        })
    }

    pub fn forward<'t>(&self, cx: &Ctx<'t>, x: Var<'t>) -> Result<Vec<Var<'t>>> {
        let p = self.backbone.forward(cx, x)?;
        let n = self.neck.forward(cx, &p)?;
        self.head.forward(cx, &n)
    }

    /// Reparameterizes the backbone for inference; returns the number of fused units.
    pub fn fuse(&mut self, store: &mut ParamStore) -> Result<usize> {
        self.backbone.fuse(store)
    }

    /// Eval-mode raw predictions per stride.
    pub fn raw_eval(&self, store: &ParamStore, images: &Tensor) -> Result<Vec<Tensor>> {
        let tape = Tape::new();
        let cx = Ctx::new(&tape, store, false);
        let x = tape.constant(images.clone());
        Ok(self.forward(&cx, x)?.iter().map(|v| (*v.value()).clone()).collect())
    }

    /// Parameters and multiply-adds of one `size`×`size` image, per component
    /// and in total.
    pub fn cost_report(&self, store: &ParamStore, size: usize) -> Result<Vec<BlockCost>> {
        let tape = Tape::new();
        let cx = Ctx::new(&tape, store, false);
        let x = tape.constant(Tensor::zeros(&[1, self.cfg.in_channels, size, size]));
        let p = self.backbone.forward(&cx, x)?;
        let after_backbone = tape.macs();
        let n = self.neck.forward(&cx, &p)?;
        let after_neck = tape.macs();
        self.head.forward(&cx, &n)?;
        let total = tape.macs();
        let cost = |block: &str, prefix: &str, mults_adds| BlockCost {
            block: block.to_string(),
            params: store.param_count(prefix),
            mults_adds,
        };
        Ok(vec![
            cost("backbone", "backbone", after_backbone),
            cost("neck", "neck", after_neck - after_backbone),
            cost("head", "head", total - after_neck),
            cost("total", "", total),
        ])
    }

    pub fn predict(&self, store: &ParamStore, images: &Tensor, nms: &NmsConfig) -> Result<Vec<Vec<Detection>>> {
        let (_, _, h, w) = images.dims4()?;
        postprocess(&self.raw_eval(store, images)?, (h, w), nms)
    }
}
