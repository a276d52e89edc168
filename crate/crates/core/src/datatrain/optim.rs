use std::collections::BTreeMap;

use crate::datatrain::config::OptimizerKind;
use crate::error::Result;
use crate::nnkit::params::{ParamKind, ParamStore};
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// Adam with L2 decay or AdamW with decoupled decay; decay applies to
/// weight-kind parameters only.
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub weight_decay: f64,
    step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, weight_decay: f64) -> Self {
        Optimizer {
            kind,
            weight_decay,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update; parameters are rounded back to f32 afterwards.
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let (c1, c2) = (1.0 - BETA1.powi(t), 1.0 - BETA2.powi(t));
        for (name, g) in grads {
            let Some(p) = store.param(name) else { continue };
            if !p.trainable() {
                continue;
            }
            let decay = if p.kind == ParamKind::Weight { self.weight_decay } else { 0.0 };
            let n = g.numel();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let w = store.get_mut(name)?;
            for (k, (wk, &gk)) in w.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gk = match self.kind {
                    OptimizerKind::Adam => gk + decay * *wk,
                    OptimizerKind::Adamw => gk,
                };
                m[k] = BETA1 * m[k] + (1.0 - BETA1) * gk;
                v[k] = BETA2 * v[k] + (1.0 - BETA2) * gk * gk;
                let mut update = (m[k] / c1) / ((v[k] / c2).sqrt() + EPS);
                if self.kind == OptimizerKind::Adamw {
                    update += decay * *wk;
                }
                *wk -= lr * update;
            }
            w.round_to_f32();
        }
        Ok(())
    }
}
