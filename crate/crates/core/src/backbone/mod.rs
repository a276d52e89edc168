//! C2f_RepViTCAMF blocks and the four-stage backbone.

pub mod c2f;
pub mod camf;
pub mod net;
pub mod precision;
pub mod repvit;

pub use c2f::{BlockConfig, C2fBlock, Unit};
pub use camf::{ContextFusion, MultiScaleContext, PlainBottleneck, RepVitCamfUnit, MSC_KERNELS};
pub use net::{Backbone, BackboneConfig, Pyramid};
pub use repvit::{fused_kernel, BranchMode, RepVitBranchSet};

use serde::Serialize;

use crate::error::Result;
use crate::nnkit::params::{Ctx, ParamStore};
use crate::nnkit::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Parameter and multiply-add count of one block at a given input size.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct BlockCost {
    pub block: String,
    pub params: usize,
    pub mults_adds: u64,
}

/// Runs `f` once in eval mode on a zero input and counts its cost.
/// Parameters are those stored under `prefix`.
pub fn measure_cost<F>(store: &ParamStore, prefix: &str, input_shape: &[usize], f: F) -> Result<BlockCost>
where
    F: for<'t> Fn(&Ctx<'t>, Var<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let cx = Ctx::new(&tape, store, false);
    let x = tape.constant(Tensor::zeros(input_shape));
    f(&cx, x)?;
    Ok(BlockCost {
        block: prefix.to_string(),
        params: store.param_count(prefix),
        mults_adds: tape.macs(),
    })
}
