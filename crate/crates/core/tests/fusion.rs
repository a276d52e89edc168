use cployo::backbone::RepVitBranchSet;
use cployo::datatrain::{
    evaluate_checkpoint, evaluate_model, fuse_checkpoint, synthesize, Checkpoint, Dataset, Detector, ModelConfig,
    SyntheticSpec,
};
use cployo::nnkit::{ParamInit, ParamStore};
use cployo::verify::{checkpoint_fusion, fusion_equivalence, perturb, FUSION_BLOCKS};
use cployo::Error;

#[test]
fn fused_blocks_match_training_form() {
    for block in FUSION_BLOCKS {
        let r = fusion_equivalence(block, 200, 11).unwrap();
        assert_eq!(r.probes, 200);
        assert!(r.max_abs_diff_f64 < 1e-10, "{block}: {:e}", r.max_abs_diff_f64);
        assert!(r.params_after < r.params_before, "{block}: {} -> {}", r.params_before, r.params_after);
        if let Some(d) = r.max_abs_diff_f32 {
            assert!(d < 1e-5, "{block} f32: {d:e}");
        }
    }
}

#[test]
fn mixer_single_precision_agreement_is_reported() {
    let r = fusion_equivalence("repvit", 200, 2).unwrap();
    assert!(r.max_abs_diff_f32.unwrap() < 1e-5);
}

#[test]
fn second_fusion_is_rejected() {
    let mut store = ParamStore::new();
    let mut set = RepVitBranchSet::new(&mut ParamInit::new(&mut store, 0), "r", 4).unwrap();
    set.fuse(&mut store).unwrap();
    assert!(matches!(set.fuse(&mut store), Err(Error::AlreadyFused)));
}

fn small_data() -> Dataset {
    let spec = SyntheticSpec {
        n_images: 6,
        seed: 4,
        ..SyntheticSpec::default()
    };
    Dataset {
        size: spec.size,
        classes: vec!["nodule".into()],
        samples: synthesize(&spec).unwrap(),
    }
}

#[test]
fn fused_and_unfused_checkpoints_evaluate_alike() {
    let mut store = ParamStore::new();
    let cfg = ModelConfig::default();
    let det = Detector::new(&mut store, 3, cfg.clone()).unwrap();
    perturb(&mut store, 3, 0.3);
    let ckpt = Checkpoint::new(cfg, store.clone());
    let fused = fuse_checkpoint(&ckpt).unwrap();
    assert!(fused.fused);
    let data = small_data();

    let unfused_metrics = evaluate_model(&det, &store, &data).unwrap();
    let a = evaluate_checkpoint(&ckpt, &data).unwrap();
    let b = evaluate_checkpoint(&fused, &data).unwrap();
    for (x, y) in [(&unfused_metrics, &a), (&a, &b)] {
        assert!((x.map50 - y.map50).abs() < 1e-6);
        assert!((x.map50_95 - y.map50_95).abs() < 1e-6);
        assert!((x.precision - y.precision).abs() < 1e-6);
        assert!((x.recall - y.recall).abs() < 1e-6);
    }

    let report = checkpoint_fusion(&ckpt, &fused, 3, 64, 0).unwrap();
    assert!(report.max_abs_diff < 1e-4, "{:e}", report.max_abs_diff);
    assert!(report.params_after < report.params_before);
}

#[test]
fn fused_checkpoint_round_trips() {
    let mut store = ParamStore::new();
    let cfg = ModelConfig::default();
    Detector::new(&mut store, 1, cfg.clone()).unwrap();
    let fused = fuse_checkpoint(&Checkpoint::new(cfg, store)).unwrap();
    let back = Checkpoint::from_bytes(&fused.to_bytes().unwrap()).unwrap();
    assert_eq!(back, fused);
    let (det, s) = back.detector().unwrap();
    let (det2, s2) = fused.detector().unwrap();
    let x = cployo::Tensor::full(&[1, 1, 64, 64], 0.3);
    assert_eq!(det.raw_eval(&s, &x).unwrap(), det2.raw_eval(&s2, &x).unwrap());
}
