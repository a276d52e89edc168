//! Gradient checks of every differentiable block and branch-fusion
//! equivalence probes, shared by the CLI, the examples and the tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{Cbam, Psa};
use crate::backbone::precision::repvit_eval;
use crate::backbone::{Backbone, BackboneConfig, BlockConfig, C2fBlock, RepVitBranchSet, RepVitCamfUnit};
use crate::datatrain::Checkpoint;
use crate::error::{Error, Result};
use crate::kan::{KanBottleneck, KanLayer, KanSpec};
use crate::neckhead::{
    assign_targets, detached_terms, detection_loss_with, GtBox, Head, HeadConfig, LevelShape, LossWeights, Neck,
    NeckConfig,
};
use crate::backbone::Pyramid;
use crate::nnkit::conv::ConvSpec;
use crate::nnkit::gradcheck::{grad_check, grad_check_at, grad_check_input, GradCheckOptions, GradCheckReport};
use crate::nnkit::layers::{Act, BatchNorm, Conv};
use crate::nnkit::ops;
use crate::nnkit::params::{Ctx, ParamInit, ParamStore};
use crate::nnkit::pool::max_pool2d;
use crate::nnkit::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const GRAD_BLOCKS: [&str; 11] = [
    "conv",
    "batchnorm",
    "cbam",
    "psa",
    "kan",
    "kan_bottleneck",
    "repvitcamf",
    "c2f",
    "neck",
    "head",
    "loss",
];

/// Pass threshold of the gradient suite.
pub const GRAD_TOL: f64 = 1e-4;

#[derive(Clone, Debug, Serialize)]
pub struct BlockGradReport {
    pub block: String,
    pub seed: u64,
    pub max_rel_error: f64,
    pub worst_tensor: String,
    pub tensors_checked: usize,
}

fn pyramid_from<'t>(x: Var<'t>) -> Result<Pyramid<'t>> {
    let p4 = max_pool2d(x, 2, 2)?;
    let p5 = max_pool2d(p4, 2, 2)?;
    Ok(Pyramid { p3: x, p4, p5 })
}

fn sum_of_weighted<'t>(outs: &[Var<'t>], seed: u64) -> Result<Var<'t>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc: Option<Var<'t>> = None;
    for &o in outs {
        let w = Tensor::randn(&o.shape(), 1.0, &mut rng);
        let s = ops::weighted_sum(o, &w)?;
        acc = Some(match acc {
            Some(a) => ops::add(a, s)?,
            None => s,
        });
    }
    acc.ok_or_else(|| Error::invalid("no outputs"))
}

fn loss_targets() -> Result<(Vec<LevelShape>, crate::neckhead::Targets)> {
    let levels: Vec<LevelShape> = [8usize, 16, 32]
        .iter()
        .map(|&s| LevelShape {
            stride: s,
            h: 64 / s,
            w: 64 / s,
        })
        .collect();
    let gt = |b: [f64; 4]| GtBox { bbox: b, class_id: 0 };
    let gts = vec![
        vec![gt([10.0, 12.0, 22.0, 21.0]), gt([30.0, 30.0, 54.0, 50.0])],
        vec![gt([4.0, 40.0, 50.0, 62.0])],
    ];
    let targets = assign_targets(&gts, (64, 64), &levels)?;
    Ok((levels, targets))
}

/// Gradient check of one named block at one seed.
pub fn check_block(name: &str, seed: u64) -> Result<BlockGradReport> {
    let mut store = ParamStore::new();
    let opts = GradCheckOptions::default();
    // A conv bias feeding a train-mode BN has an exactly zero gradient, which
    // the relative metric cannot score; composites run with running statistics.
    let eval_opts = GradCheckOptions {
        train: false,
        ..GradCheckOptions::default()
    };
    let report: GradCheckReport = {
        let init = &mut ParamInit::new(&mut store, seed);
        match name {
            "conv" => {
                let a = Conv::new(init, "a", ConvSpec::new(4, 6, 3).with_bn(), Some(Act::Silu))?;
                let b = Conv::new(init, "b", ConvSpec::depthwise(6, 3).stride(2), None)?;
                grad_check(&store, &[2, 4, 8, 8], seed, &opts, |cx, x| b.forward(cx, a.forward(cx, x)?))?
            }
            "batchnorm" => {
                let bn = BatchNorm::new(init, "bn", 3);
                perturb(&mut store, seed, 0.3);
                grad_check(&store, &[2, 3, 4, 4], seed, &opts, |cx, x| bn.forward(cx, x))?
            }
            "cbam" => {
                let c = Cbam::new(init, "cbam", 8, 2)?;
                grad_check(&store, &[2, 8, 6, 6], seed, &opts, |cx, x| c.forward(cx, x))?
            }
            "psa" => {
                let p = Psa::new(init, "psa", 4);
                grad_check(&store, &[2, 4, 5, 5], seed, &opts, |cx, x| p.forward(cx, x))?
            }
            "kan" => {
                let k = KanLayer::new(init, "kan", KanSpec::new(4, 3))?;
                grad_check(&store, &[2, 4, 3, 3], seed, &opts, |cx, x| k.forward(cx, x))?
            }
            "kan_bottleneck" => {
                let k = KanBottleneck::new(init, "kb", 6, true)?;
                grad_check(&store, &[2, 6, 4, 4], seed, &opts, |cx, x| k.forward(cx, x))?
            }
            "repvitcamf" => {
                let u = RepVitCamfUnit::new(init, "u", 8, true, 2)?;
                grad_check(&store, &[2, 8, 6, 6], seed, &opts, |cx, x| u.forward(cx, x))?
            }
            "c2f" => {
                let mut bc = BlockConfig::new(8, 1);
                bc.reduction = 2;
                let b = C2fBlock::new(init, "c2f", 8, bc)?;
                perturb(&mut store, seed, 0.3);
                grad_check(&store, &[1, 8, 8, 8], seed, &eval_opts, |cx, x| b.forward(cx, x))?
            }
            "neck" => {
                let neck = Neck::new(
                    init,
                    "neck",
                    NeckConfig {
                        channels: [4, 4, 4],
                        use_mscaf: true,
                        use_kan_bottleneck: true,
                        reduction: 2,
                    },
                )?;
                perturb(&mut store, seed, 0.3);
                grad_check(&store, &[2, 4, 8, 8], seed, &eval_opts, |cx, x| {
                    let outs = neck.forward(cx, &pyramid_from(x)?)?;
                    sum_of_weighted(&outs, seed)
                })?
            }
            "head" => {
                let head = Head::new(
                    init,
                    "head",
                    HeadConfig {
                        in_channels: [4, 4, 4],
                        hidden: 4,
                        num_classes: 1,
                    },
                )?;
                grad_check(&store, &[2, 4, 8, 8], seed, &opts, |cx, x| {
                    let p = pyramid_from(x)?;
                    let outs = head.forward(cx, &[p.p3, p.p4, p.p5])?;
                    sum_of_weighted(&outs, seed)
                })?
            }
            "loss" => {
                let (_, targets) = loss_targets()?;
                let x = grad_check_input(&[2, 6, 8, 8], seed, &opts);
                let tape = Tape::new();
                let p = pyramid_from(tape.constant(x.clone()))?;
                let base: Vec<Tensor> = [p.p3, p.p4, p.p5].iter().map(|v| (*v.value()).clone()).collect();
                let det = detached_terms(&base, &targets)?;
                let w = LossWeights::default();
                grad_check_at(&store, &x, seed, &opts, |_cx, x| {
                    let p = pyramid_from(x)?;
                    Ok(detection_loss_with(&[p.p3, p.p4, p.p5], &targets, &w, &det)?.0)
                })?
            }
            other => {
                return Err(Error::invalid(format!(
                    "unknown block {other:?}; expected one of {}",
                    GRAD_BLOCKS.join(", ")
                )))
            }
        }
    };
    Ok(BlockGradReport {
        block: name.to_string(),
        seed,
        max_rel_error: report.max_rel_error,
        worst_tensor: report.worst_tensor,
        tensors_checked: report.tensors.len(),
    })
}

/// Randomizes batch-norm affine terms and running statistics so that
/// folding them is not the identity.
pub fn perturb(store: &mut ParamStore, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(17));
    for (name, p) in store.iter_mut() {
        if !name.contains("bn.") {
            continue;
        }
        let leaf = name.rsplit('.').next().unwrap_or("");
        for v in p.tensor.data_mut() {
            *v = match leaf {
                "running_var" => rng.random_range(0.5..1.5),
                "running_mean" => rng.random_range(-scale..scale),
                "weight" => rng.random_range(0.5..1.5),
                _ => *v + rng.random_range(-scale..scale),
            };
        }
        p.tensor.round_to_f32();
    }
}

pub const FUSION_BLOCKS: [&str; 4] = ["repvit", "repvitcamf", "c2f", "backbone"];

#[derive(Clone, Debug, Serialize)]
pub struct FusionReport {
    pub block: String,
    pub probes: usize,
    pub max_abs_diff_f64: f64,
    /// Single-precision comparison, available for the RepViT mixer.
    pub max_abs_diff_f32: Option<f64>,
    pub params_before: usize,
    pub params_after: usize,
}

fn eval_forward<F>(store: &ParamStore, x: &Tensor, f: &F) -> Result<Tensor>
where
    F: for<'t> Fn(&Ctx<'t>, Var<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let cx = Ctx::new(&tape, store, false);
    let y = f(&cx, tape.constant(x.clone()))?;
    let v = (*y.value()).clone();
    Ok(v)
}

fn max_diff_over<F, G>(train_store: &ParamStore, fused_store: &ParamStore, shape: &[usize], probes: usize, seed: u64, a: F, b: G) -> Result<f64>
where
    F: for<'t> Fn(&Ctx<'t>, Var<'t>) -> Result<Var<'t>>,
    G: for<'t> Fn(&Ctx<'t>, Var<'t>) -> Result<Var<'t>>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..probes {
        let x = Tensor::randn(shape, 1.0, &mut rng);
        let ya = eval_forward(train_store, &x, &a)?;
        let yb = eval_forward(fused_store, &x, &b)?;
        worst = worst.max(ya.max_abs_diff(&yb)?);
    }
    Ok(worst)
}

/// Compares eval-mode outputs before and after branch fusion on random inputs.
pub fn fusion_equivalence(block: &str, probes: usize, seed: u64) -> Result<FusionReport> {
    let mut store = ParamStore::new();
    let init = &mut ParamInit::new(&mut store, seed);
    macro_rules! run {
        ($module:expr, $shape:expr, $f32:expr) => {{
            let module = $module;
            perturb(&mut store, seed, 0.3);
            let mut fused = module.clone();
            let mut fused_store = store.clone();
            fused.fuse(&mut fused_store)?;
            let d64 = max_diff_over(&store, &fused_store, &$shape, probes, seed, |cx, x| module.forward(cx, x), |cx, x| fused.forward(cx, x))?;
            let d32 = if $f32 { Some(f32_diff(&module, &fused, &store, &fused_store, $shape, probes, seed)?) } else { None };
            Ok(FusionReport {
                block: block.to_string(),
                probes,
                max_abs_diff_f64: d64,
                max_abs_diff_f32: d32,
                params_before: store.param_count(""),
                params_after: fused_store.param_count(""),
            })
        }};
    }
    match block {
        "repvit" => run!(RepVitBranchSet::new(init, "r", 8)?, [1, 8, 6, 6], true),
        "repvitcamf" => run!(RepVitCamfUnit::new(init, "u", 8, true, 2)?, [1, 8, 6, 6], false),
        "c2f" => {
            let mut bc = BlockConfig::new(16, 2);
            bc.reduction = 2;
            run!(C2fBlock::new(init, "c2f", 8, bc)?, [1, 8, 6, 6], false)
        }
        "backbone" => {
            let cfg = BackboneConfig {
                in_channels: 1,
                width_mult: 0.25,
                depth_mult: 0.33,
                use_c2f_repvitcamf: true,
                reduction: 4,
            };
            let bb = Backbone::new(init, "backbone", cfg)?;
            perturb(&mut store, seed, 0.3);
            let mut fused = bb.clone();
            let mut fused_store = store.clone();
            fused.fuse(&mut fused_store)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut worst = 0.0f64;
            for _ in 0..probes {
                let x = Tensor::randn(&[1, 1, 32, 32], 1.0, &mut rng);
                let ya = backbone_outputs(&bb, &store, &x)?;
                let yb = backbone_outputs(&fused, &fused_store, &x)?;
                for (a, b) in ya.iter().zip(&yb) {
                    worst = worst.max(a.max_abs_diff(b)?);
                }
            }
            Ok(FusionReport {
                block: block.to_string(),
                probes,
                max_abs_diff_f64: worst,
                max_abs_diff_f32: None,
                params_before: store.param_count(""),
                params_after: fused_store.param_count(""),
            })
        }
        other => Err(Error::invalid(format!(
            "unknown fusion block {other:?}; expected one of {}",
            FUSION_BLOCKS.join(", ")
        ))),
    }
}

fn backbone_outputs(bb: &Backbone, store: &ParamStore, x: &Tensor) -> Result<Vec<Tensor>> {
    let tape = Tape::new();
    let cx = Ctx::new(&tape, store, false);
    let p = bb.forward(&cx, tape.constant(x.clone()))?;
    let out = [p.p3, p.p4, p.p5].iter().map(|v| (*v.value()).clone()).collect();
    Ok(out)
}

trait AsRepVit {
    fn as_repvit(&self) -> Option<&RepVitBranchSet>;
}

impl AsRepVit for RepVitBranchSet {
    fn as_repvit(&self) -> Option<&RepVitBranchSet> {
        Some(self)
    }
}

impl AsRepVit for RepVitCamfUnit {
    fn as_repvit(&self) -> Option<&RepVitBranchSet> {
        None
    }
}

impl AsRepVit for C2fBlock {
    fn as_repvit(&self) -> Option<&RepVitBranchSet> {
        None
    }
}

fn f32_diff<M: AsRepVit>(
    module: &M,
    fused: &M,
    store: &ParamStore,
    fused_store: &ParamStore,
    shape: [usize; 4],
    probes: usize,
    seed: u64,
) -> Result<f64> {
    let (Some(a), Some(b)) = (module.as_repvit(), fused.as_repvit()) else {
        return Err(Error::invalid("single-precision path exists only for the RepViT mixer"));
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f32;
    for _ in 0..probes {
        let x: Vec<f32> = Tensor::randn(&shape, 1.0, &mut rng).data().iter().map(|&v| v as f32).collect();
        let ya = repvit_eval::<f32>(a, store, &x, shape)?;
        let yb = repvit_eval::<f32>(b, fused_store, &x, shape)?;
        for (p, q) in ya.iter().zip(&yb) {
            worst = worst.max((p - q).abs());
        }
    }
    Ok(f64::from(worst))
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckpointFusionReport {
    pub probes: usize,
    pub image_size: usize,
    pub max_abs_diff: f64,
    pub params_before: usize,
    pub params_after: usize,
}

/// Raw head outputs of a checkpoint and its fused copy on random images.
pub fn checkpoint_fusion(
    original: &Checkpoint,
    fused: &Checkpoint,
    probes: usize,
    image_size: usize,
    seed: u64,
) -> Result<CheckpointFusionReport> {
    let (da, sa) = original.detector()?;
    let (db, sb) = fused.detector()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..probes {
        let data: Vec<f64> = (0..image_size * image_size).map(|_| rng.random::<f64>()).collect();
        let x = Tensor::new(&[1, 1, image_size, image_size], data)?;
        let ya = da.raw_eval(&sa, &x)?;
        let yb = db.raw_eval(&sb, &x)?;
        for (a, b) in ya.iter().zip(&yb) {
            worst = worst.max(a.max_abs_diff(b)?);
        }
    }
    Ok(CheckpointFusionReport {
        probes,
        image_size,
        max_abs_diff: worst,
        params_before: sa.param_count(""),
        params_after: sb.param_count(""),
    })
}
