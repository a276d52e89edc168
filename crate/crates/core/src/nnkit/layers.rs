//! Parameterized layers built from the primitive ops.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::nnkit::conv::{conv2d, ConvSpec};
use crate::nnkit::norm::{batchnorm_eval, batchnorm_train};
use crate::nnkit::ops;
use crate::nnkit::params::{join, Ctx, ParamInit, ParamKind};
use crate::nnkit::tape::Var;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Act {
    Silu,
    Sigmoid,
    Relu,
}

pub fn act(x: Var<'_>, kind: Act) -> Var<'_> {
    match kind {
        Act::Silu => ops::silu(x),
        Act::Sigmoid => ops::sigmoid(x),
        Act::Relu => ops::relu(x),
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub prefix: String,
    pub channels: usize,
}

impl BatchNorm {
    pub fn new(init: &mut ParamInit<'_>, prefix: &str, channels: usize) -> Self {
        init.constant(&join(prefix, "weight"), &[channels], 1.0, ParamKind::Bias);
        init.constant(&join(prefix, "bias"), &[channels], 0.0, ParamKind::Bias);
        init.constant(&join(prefix, "running_mean"), &[channels], 0.0, ParamKind::Buffer);
        init.constant(&join(prefix, "running_var"), &[channels], 1.0, ParamKind::Buffer);
        BatchNorm {
            prefix: prefix.to_string(),
            channels,
        }
    }

    pub fn forward<'t>(&self, cx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let gamma = cx.param(&join(&self.prefix, "weight"))?;
        let beta = cx.param(&join(&self.prefix, "bias"))?;
        if cx.train() {
            let (y, stats) = batchnorm_train(x, gamma, beta)?;
            cx.record_stats(&self.prefix, stats);
            Ok(y)
        } else {
            batchnorm_eval(
                x,
                gamma,
                beta,
                cx.buffer(&join(&self.prefix, "running_mean"))?,
                cx.buffer(&join(&self.prefix, "running_var"))?,
            )
        }
    }
}

/// Convolution with optional batch norm and activation.
///
/// With batch norm the convolution carries no bias.
#[derive(Clone, Debug)]
pub struct Conv {
    pub prefix: String,
    pub spec: ConvSpec,
    pub bn: Option<BatchNorm>,
    pub act: Option<Act>,
}

impl Conv {
    pub fn new(init: &mut ParamInit<'_>, prefix: &str, spec: ConvSpec, act: Option<Act>) -> Result<Self> {
        spec.validate()?;
        let fan_in = spec.in_ch / spec.groups * spec.kernel * spec.kernel;
        init.weight(&join(prefix, "weight"), &spec.weight_shape(), fan_in);
        let bn = if spec.has_bn {
            Some(BatchNorm::new(init, &join(prefix, "bn"), spec.out_ch))
        } else {
            init.bias(&join(prefix, "bias"), spec.out_ch, fan_in);
            None
        };
        Ok(Conv {
            prefix: prefix.to_string(),
            spec,
            bn,
            act,
        })
    }

    pub fn forward<'t>(&self, cx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let w = cx.param(&join(&self.prefix, "weight"))?;
        let b = match self.bn {
            Some(_) => None,
            None => Some(cx.param(&join(&self.prefix, "bias"))?),
        };
        let mut y = conv2d(x, w, b, self.spec.geometry())?;
        if let Some(bn) = &self.bn {
            y = bn.forward(cx, y)?;
        }
        Ok(match self.act {
            Some(a) => act(y, a),
            None => y,
        })
    }
}

/// Depthwise convolution followed by a pointwise 1×1 convolution.
pub fn depthwise_separable<'t>(cx: &Ctx<'t>, x: Var<'t>, depthwise: &Conv, pointwise: &Conv) -> Result<Var<'t>> {
    let y = depthwise.forward(cx, x)?;
    pointwise.forward(cx, y)
}

/// Parameter count of a depthwise-separable pair without biases.
pub fn separable_weight_count(channels: usize, out_ch: usize, kernel: usize) -> usize {
    channels * kernel * kernel + channels * out_ch
}
