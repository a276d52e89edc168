//! Named parameter storage and the forward-pass context.
//!
//! Layers own only their configuration and a name prefix; every tensor lives
//! in a [`ParamStore`] under a dotted path such as `backbone.stem.conv.weight`.
//! A [`Ctx`] binds a store to a [`Tape`] for one forward/backward pass.

use std::cell::RefCell;
use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nnkit::norm::BatchStats;
use crate::nnkit::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    /// Trainable, subject to weight decay.
    Weight,
    /// Trainable, exempt from weight decay (biases, norm affine terms).
    Bias,
    /// Non-trainable state such as running statistics.
    Buffer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub tensor: Tensor,
    pub kind: ParamKind,
    pub frozen: bool,
}

impl Param {
    pub fn trainable(&self) -> bool {
        self.kind != ParamKind::Buffer && !self.frozen
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor, kind: ParamKind) {
        self.entries.insert(
            name.into(),
            Param {
                tensor,
                kind,
                frozen: false,
            },
        );
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|p| &p.tensor)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .map(|p| &mut p.tensor)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn set(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let slot = self.get_mut(name)?;
        if slot.shape() != tensor.shape() {
            return Err(Error::shape(format!(
                "{name}: stored {:?}, new {:?}",
                slot.shape(),
                tensor.shape()
            )));
        }
        *slot = tensor;
        Ok(())
    }

    pub fn remove(&mut self, name: &str) -> Option<Param> {
        self.entries.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Marks every entry under the dotted `prefix` as frozen.
    pub fn freeze_prefix(&mut self, prefix: &str) -> usize {
        let mut count = 0;
        for (name, p) in self.entries.iter_mut() {
            if under(name, prefix) {
                p.frozen = true;
                count += 1;
            }
        }
        count
    }

    /// Number of scalar parameters (buffers excluded) under `prefix`.
    pub fn param_count(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|(n, p)| under(n, prefix) && p.kind != ParamKind::Buffer)
            .map(|(_, p)| p.tensor.numel())
            .sum()
    }

    pub fn round_to_f32(&mut self) {
        for p in self.entries.values_mut() {
            p.tensor.round_to_f32();
        }
    }

    /// Folds train-mode batch statistics into the running buffers, skipping
    /// frozen ones, and rounds them to f32.
    pub fn apply_bn_updates(&mut self, updates: Vec<(String, BatchStats)>) -> Result<()> {
        for (prefix, stats) in updates {
            if self.param(&format!("{prefix}.running_mean")).is_some_and(|p| p.frozen) {
                continue;
            }
            let mut mean = self.get(&format!("{prefix}.running_mean"))?.clone();
            let mut var = self.get(&format!("{prefix}.running_var"))?.clone();
            stats.update_running(mean.data_mut(), var.data_mut());
            mean.round_to_f32();
            var.round_to_f32();
            self.set(&format!("{prefix}.running_mean"), mean)?;
            self.set(&format!("{prefix}.running_var"), var)?;
        }
        Ok(())
    }
}

/// Creates parameters with seeded random initialization.
pub struct ParamInit<'a> {
    pub store: &'a mut ParamStore,
    pub rng: ChaCha8Rng,
}

impl<'a> ParamInit<'a> {
    pub fn new(store: &'a mut ParamStore, seed: u64) -> Self {
        ParamInit {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Kaiming-uniform style weight with the given fan-in.
    pub fn weight(&mut self, name: &str, shape: &[usize], fan_in: usize) {
        let bound = (1.0 / fan_in.max(1) as f64).sqrt() * 3f64.sqrt();
        let mut t = Tensor::uniform(shape, -bound, bound, &mut self.rng);
        t.round_to_f32();
        self.store.insert(name, t, ParamKind::Weight);
    }

    pub fn bias(&mut self, name: &str, len: usize, fan_in: usize) {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let mut t = Tensor::uniform(&[len], -bound, bound, &mut self.rng);
        t.round_to_f32();
        self.store.insert(name, t, ParamKind::Bias);
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64, kind: ParamKind) {
        self.store.insert(name, Tensor::full(shape, value), kind);
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64, kind: ParamKind) {
        let mut t = Tensor::randn(shape, std, &mut self.rng);
        t.round_to_f32();
        self.store.insert(name, t, kind);
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], lo: f64, hi: f64, kind: ParamKind) {
        let mut t = Tensor::uniform(shape, lo, hi, &mut self.rng);
        t.round_to_f32();
        self.store.insert(name, t, kind);
    }

    pub fn rng(&mut self) -> &mut impl Rng {
        &mut self.rng
    }
}

/// Binds a parameter store to a tape for one pass.
pub struct Ctx<'t> {
    pub tape: &'t Tape,
    store: &'t ParamStore,
    train: bool,
    leaves: RefCell<BTreeMap<String, Var<'t>>>,
    stat_updates: RefCell<Vec<(String, BatchStats)>>,
}

impl<'t> Ctx<'t> {
    pub fn new(tape: &'t Tape, store: &'t ParamStore, train: bool) -> Self {
        Ctx {
            tape,
            store,
            train,
            leaves: RefCell::new(BTreeMap::new()),
            stat_updates: RefCell::new(Vec::new()),
        }
    }

    pub fn train(&self) -> bool {
        self.train
    }

    pub fn store(&self) -> &'t ParamStore {
        self.store
    }

    /// Leaf variable for a stored parameter, created once per pass.
    pub fn param(&self, name: &str) -> Result<Var<'t>> {
        if let Some(v) = self.leaves.borrow().get(name) {
            return Ok(*v);
        }
        let p = self
            .store
            .param(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))?;
        let v = self.tape.leaf(p.tensor.clone(), p.trainable());
        self.leaves.borrow_mut().insert(name.to_string(), v);
        Ok(v)
    }

    pub fn buffer(&self, name: &str) -> Result<&'t Tensor> {
        self.store.get(name)
    }

    pub fn record_stats(&self, prefix: &str, stats: BatchStats) {
        self.stat_updates.borrow_mut().push((prefix.to_string(), stats));
    }

    pub fn take_stat_updates(&self) -> Vec<(String, BatchStats)> {
        std::mem::take(&mut self.stat_updates.borrow_mut())
    }

    /// Gradients of every trainable parameter touched in this pass.
    pub fn param_grads(&self, grads: &mut Gradients) -> BTreeMap<String, Tensor> {
        self.leaves
            .borrow()
            .iter()
            .filter_map(|(name, &v)| grads.take(v).map(|g| (name.clone(), g)))
            .collect()
    }
}

/// Joins a prefix and a leaf name with a dot.
pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// True when `name` equals `prefix` or lies below it in the dotted hierarchy.
pub fn under(name: &str, prefix: &str) -> bool {
    prefix.is_empty()
        || (name.starts_with(prefix)
            && (name.len() == prefix.len() || name[prefix.len()..].starts_with('.')))
}
