use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::datatrain::checkpoint::{Checkpoint, EpochRecord, FORMAT_VERSION};
use crate::datatrain::config::TrainConfig;
use crate::datatrain::dataset::Dataset;
use crate::datatrain::model::Detector;
use crate::datatrain::optim::Optimizer;
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalResult};
use crate::neckhead::{assign_targets, detection_loss, LevelShape, LossParts, LossWeights, NmsConfig, STRIDES};
use crate::nnkit::params::{Ctx, ParamStore};
use crate::nnkit::tape::Tape;
use crate::tensor::Tensor;

/// NMS used when scoring: a low score floor so the PR curve is complete.
pub const EVAL_NMS: NmsConfig = NmsConfig {
    iou_thr: 0.45,
    score_thr: 0.001,
    max_out: 300,
};
/// Score threshold for reported precision and recall.
pub const EVAL_SCORE_THR: f64 = 0.25;
const EVAL_BATCH: usize = 16;

/// Image hook run before fine-tuning; the default leaves pixels unchanged.
pub type Enhancement = fn(&mut [u8]);

pub fn no_enhancement(_pixels: &mut [u8]) {}

pub fn levels_for(size: usize) -> Vec<LevelShape> {
    STRIDES
        .iter()
        .map(|&s| LevelShape {
            stride: s,
            h: size / s,
            w: size / s,
        })
        .collect()
}

/// Owns the model, parameters and optimizer state of one training run.
pub struct Trainer<'d> {
    pub cfg: TrainConfig,
    pub data: &'d Dataset,
    pub detector: Detector,
    pub store: ParamStore,
    pub history: Vec<EpochRecord>,
    pub weights: LossWeights,
    optimizer: Optimizer,
    order_rng: ChaCha8Rng,
    epoch: usize,
}

impl<'d> Trainer<'d> {
    pub fn new(cfg: &TrainConfig, data: &'d Dataset) -> Result<Self> {
        let mut store = ParamStore::new();
        let detector = Detector::new(&mut store, cfg.seed, cfg.model())?;
        Self::with_model(cfg, data, detector, store)
    }

    pub fn with_model(cfg: &TrainConfig, data: &'d Dataset, detector: Detector, mut store: ParamStore) -> Result<Self> {
        cfg.validate()?;
        if data.is_empty() {
            return Err(Error::Data("training set is empty".into()));
        }
        if cfg.freeze_backbone {
            store.freeze_prefix("backbone");
        }
        for p in &cfg.freeze_prefixes {
            store.freeze_prefix(p);
        }
        Ok(Trainer {
            cfg: cfg.clone(),
            data,
            detector,
            store,
            history: Vec::new(),
            weights: LossWeights::default(),
            optimizer: Optimizer::new(cfg.optimizer, cfg.weight_decay),
            order_rng: ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1)),
            epoch: 0,
        })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Loss of a batch and the gradients of every trainable parameter.
    pub fn loss_and_grads(&self, indices: &[usize], flips: &[bool]) -> Result<(LossParts, BTreeMap<String, Tensor>, Vec<(String, crate::nnkit::norm::BatchStats)>)> {
        let x = self.data.batch(indices, flips)?;
        let gts = self.data.boxes(indices, flips);
        let targets = assign_targets(&gts, (self.data.size, self.data.size), &levels_for(self.data.size))?;
        let tape = Tape::new();
        let cx = Ctx::new(&tape, &self.store, true);
        let xv = tape.constant(x);
        let raw = self.detector.forward(&cx, xv)?;
        let (loss, parts) = detection_loss(&raw, &targets, &self.weights)?;
        let mut grads = tape.backward(loss)?;
        let g = cx.param_grads(&mut grads);
        if let Some((name, _)) = g.iter().find(|(_, t)| !t.all_finite()) {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
        Ok((parts, g, cx.take_stat_updates()))
    }

    /// One optimizer step on the given images.
    pub fn step(&mut self, indices: &[usize], flips: &[bool], lr: f64) -> Result<LossParts> {
        let (parts, grads, stats) = self.loss_and_grads(indices, flips)?;
        self.store.apply_bn_updates(stats)?;
        self.optimizer.step(&mut self.store, &grads, lr)?;
        Ok(parts)
    }

    pub fn run_epoch(&mut self) -> Result<EpochRecord> {
        let mut order: Vec<usize> = (0..self.data.len()).collect();
        order.shuffle(&mut self.order_rng);
        let lr = self.cfg.lr_at(self.epoch);
        let mut sum = LossParts::default();
        for (b, chunk) in order.chunks(self.cfg.batch_size).enumerate() {
            let flips: Vec<bool> = chunk
                .iter()
                .map(|_| self.cfg.hflip && self.order_rng.random_bool(0.5))
                .collect();
            let parts = self.step(chunk, &flips, lr).map_err(|e| match e {
                Error::NonFinite(msg) => {
                    let ids: Vec<&str> = chunk.iter().map(|&i| self.data.samples[i].id.as_str()).collect();
                    Error::NonFinite(format!("epoch {} batch {b} (images {}): {msg}", self.epoch, ids.join(", ")))
                }
                other => other,
            })?;
            let k = chunk.len() as f64;
            sum.total += parts.total * k;
            sum.box_ciou += parts.box_ciou * k;
            sum.obj_bce += parts.obj_bce * k;
            sum.cls_bce += parts.cls_bce * k;
        }
        let n = self.data.len() as f64;
        self.epoch += 1;
        let evaluate_now = self.cfg.eval_every > 0 && (self.epoch % self.cfg.eval_every == 0 || self.epoch == self.cfg.epochs);
        let map50 = if evaluate_now {
            Some(evaluate_model(&self.detector, &self.store, self.data)?.map50)
        } else {
            None
        };
        let rec = EpochRecord {
            epoch: self.epoch,
            loss: sum.total / n,
            box_ciou: sum.box_ciou / n,
            obj_bce: sum.obj_bce / n,
            cls_bce: sum.cls_bce / n,
            map50,
        };
        log::info!(
            "epoch {} loss {:.5} box {:.4} obj {:.4} cls {:.4}{}",
            rec.epoch,
            rec.loss,
            rec.box_ciou,
            rec.obj_bce,
            rec.cls_bce,
            rec.map50.map(|m| format!(" map50 {m:.4}")).unwrap_or_default()
        );
        self.history.push(rec.clone());
        Ok(rec)
    }

    /// Runs until `epochs` or until the target mAP50 is reached.
    pub fn fit(&mut self) -> Result<()> {
        while self.epoch < self.cfg.epochs {
            let rec = self.run_epoch()?;
            if let (Some(target), Some(m)) = (self.cfg.target_map50, rec.map50) {
                if m >= target {
                    break;
                }
            }
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut store = self.store.clone();
        for (_, p) in store.iter_mut() {
            p.frozen = false;
        }
        Checkpoint {
            format_version: FORMAT_VERSION.to_string(),
            model: self.detector.cfg.clone(),
            train: Some(self.cfg.clone()),
            fused: false,
            epoch: self.epoch,
            history: self.history.clone(),
            store,
        }
    }
}

/// Trains from a fresh initialization.
pub fn train(cfg: &TrainConfig, data: &Dataset) -> Result<Checkpoint> {
    let mut t = Trainer::new(cfg, data)?;
    t.fit()?;
    Ok(t.checkpoint())
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    pub checkpoint: Checkpoint,
    /// Parameters not transferred: absent on one side or of different shape.
    pub skipped: Vec<String>,
}

/// Copies every tensor of matching name and shape from `src` into `dst`.
/// Returns the names that could not be copied.
pub fn load_matching(dst: &mut ParamStore, src: &ParamStore) -> Vec<String> {
    let mut skipped = Vec::new();
    for (name, p) in src.iter() {
        match dst.param(name) {
            Some(d) if d.tensor.shape() == p.tensor.shape() => {
                dst.set(name, p.tensor.clone()).expect("shape checked");
            }
            _ => skipped.push(name.clone()),
        }
    }
    for (name, _) in dst.iter() {
        if !src.contains(name) {
            skipped.push(name.clone());
        }
    }
    skipped.sort();
    skipped.dedup();
    skipped
}

/// Initializes from `pretrained`, freezes as configured and trains on `data`.
pub fn finetune(cfg: &TrainConfig, pretrained: &Checkpoint, data: &Dataset, enhance: Enhancement) -> Result<FinetuneOutcome> {
    if pretrained.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "pretrained format version {:?}, expected {FORMAT_VERSION:?}",
            pretrained.format_version
        )));
    }
    if pretrained.fused {
        return Err(Error::Checkpoint("cannot fine-tune a fused checkpoint".into()));
    }
    let mut data = data.clone();
    for s in &mut data.samples {
        enhance(&mut s.pixels);
    }
    let mut store = ParamStore::new();
    let detector = Detector::new(&mut store, cfg.seed, cfg.model())?;
    let skipped = load_matching(&mut store, &pretrained.store);
    let mut t = Trainer::with_model(cfg, &data, detector, store)?;
    t.fit()?;
    Ok(FinetuneOutcome {
        checkpoint: t.checkpoint(),
        skipped,
    })
}

/// Eval-mode detections for every image, with the scoring NMS.
pub fn predict_dataset(det: &Detector, store: &ParamStore, data: &Dataset) -> Result<Vec<Vec<crate::neckhead::Detection>>> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut out = Vec::with_capacity(data.len());
    for chunk in idx.chunks(EVAL_BATCH) {
        let x = data.batch(chunk, &[])?;
        out.extend(det.predict(store, &x, &EVAL_NMS)?);
    }
    Ok(out)
}

/// Metrics of a model as it stands (no fusion applied).
pub fn evaluate_model(det: &Detector, store: &ParamStore, data: &Dataset) -> Result<EvalResult> {
    let dets = predict_dataset(det, store, data)?;
    let idx: Vec<usize> = (0..data.len()).collect();
    Ok(evaluate(&dets, &data.boxes(&idx, &[]), EVAL_SCORE_THR))
}

/// Fused-mode metrics of a checkpoint.
pub fn evaluate_checkpoint(ckpt: &Checkpoint, data: &Dataset) -> Result<EvalResult> {
    let (mut det, mut store) = ckpt.detector()?;
    if !ckpt.fused {
        det.fuse(&mut store)?;
    }
    evaluate_model(&det, &store, data)
}

/// Fused copy of a checkpoint.
pub fn fuse_checkpoint(ckpt: &Checkpoint) -> Result<Checkpoint> {
    let (mut det, mut store) = ckpt.detector()?;
    det.fuse(&mut store)?;
    store.round_to_f32();
    Ok(Checkpoint {
        fused: true,
        store,
        ..ckpt.clone()
    })
}
