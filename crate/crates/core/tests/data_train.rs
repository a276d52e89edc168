use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cployo::datatrain::synthetic::LUNG_FIELD;
use cployo::datatrain::{
    evaluate_checkpoint, finetune, format_labels, generate_synthetic, load_dataset, no_enhancement, parse_labels,
    synthesize, Checkpoint, Dataset, SyntheticSpec, TrainConfig, Trainer, FORMAT_VERSION,
};
use cployo::error::Error;
use cployo::neckhead::GtBox;

fn dataset(n: usize, seed: u64) -> Dataset {
    let spec = SyntheticSpec {
        n_images: n,
        seed,
        ..SyntheticSpec::default()
    };
    Dataset {
        size: spec.size,
        classes: vec!["nodule".into()],
        samples: synthesize(&spec).unwrap(),
    }
}

fn small_cfg(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 1,
        batch_size: 4,
        lr: 0.003,
        seed,
        ..TrainConfig::default()
    }
}

#[test]
fn labels_match_rendered_pixels() {
    let spec = SyntheticSpec {
        n_images: 20,
        noise_sigma: 0.0,
        seed: 9,
        ..SyntheticSpec::default()
    };
    let n = spec.size;
    let mut checked = 0;
    for s in synthesize(&spec).unwrap() {
        for g in &s.boxes {
            let [x0, y0, x1, y1] = g.bbox;
            let (lo_x, lo_y) = ((x0 - 2.0).floor().max(0.0) as usize, (y0 - 2.0).floor().max(0.0) as usize);
            let (hi_x, hi_y) = ((x1 + 2.0).ceil().min(n as f64) as usize, (y1 + 2.0).ceil().min(n as f64) as usize);
            let mut tight = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
            for y in lo_y..hi_y {
                for x in lo_x..hi_x {
                    let (cx, cy, r) = ((x0 + x1) / 2.0, (y0 + y1) / 2.0, (x1 - x0) / 2.0);
                    let inside = (x as f64 + 0.5 - cx).hypot(y as f64 + 0.5 - cy) <= r + 2.0;
                    if inside && f64::from(s.pixels[y * n + x]) > LUNG_FIELD {
                        tight = [tight[0].min(x as f64), tight[1].min(y as f64), tight[2].max(x as f64 + 1.0), tight[3].max(y as f64 + 1.0)];
                    }
                }
            }
            for k in 0..4 {
                assert!((tight[k] - g.bbox[k]).abs() <= 1.0, "{}: box {:?} vs pixels {:?}", s.id, g.bbox, tight);
            }
            checked += 1;
        }
    }
    assert!(checked >= 10);
}

#[test]
fn labels_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let size = 64;
    for _ in 0..100 {
        let boxes: Vec<GtBox> = (0..rng.random_range(0..6))
            .map(|_| {
                let (x, y) = (rng.random_range(0.0..50.0), rng.random_range(0.0..50.0));
                GtBox {
                    bbox: [x, y, x + rng.random_range(1.0..14.0), y + rng.random_range(1.0..14.0)],
                    class_id: rng.random_range(0..3),
                }
            })
            .collect();
        let text = format_labels(&boxes, size);
        let back = parse_labels(&text, Path::new("a.txt"), size, 3).unwrap();
        assert_eq!(back.len(), boxes.len());
        for (a, b) in boxes.iter().zip(&back) {
            assert_eq!(a.class_id, b.class_id);
            for k in 0..4 {
                assert!((a.bbox[k] - b.bbox[k]).abs() < 1e-4 * size as f64);
            }
        }
        assert_eq!(format_labels(&back, size), text);
    }
}

#[test]
fn malformed_labels_name_file_and_line() {
    let cases = [
        ("0 0.5 0.5 0.1 0.1\n0 0.5 0.5 0.1\n", 2),
        ("1 0.5 0.5 0.1 0.1\n", 1),
        ("0 0.5 0.5 0.1 0.1\n\n0 0.98 0.5 0.1 0.1\n", 3),
        ("0 x 0.5 0.1 0.1\n", 1),
        ("0 0.5 0.5 -0.1 0.1\n", 1),
    ];
    for (text, want) in cases {
        match parse_labels(text, Path::new("labels/img.txt"), 64, 1) {
            Err(Error::Label { file, line, .. }) => {
                assert_eq!(file, Path::new("labels/img.txt"));
                assert_eq!(line, want, "{text:?}");
            }
            other => panic!("{text:?} gave {other:?}"),
        }
    }
}

#[test]
fn synthetic_data_is_reproducible_and_loads_back() {
    let spec = SyntheticSpec {
        n_images: 6,
        seed: 3,
        ..SyntheticSpec::default()
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    generate_synthetic(&spec, a.path()).unwrap();
    generate_synthetic(&spec, b.path()).unwrap();
    for sub in ["images", "labels"] {
        let mut names: Vec<_> = std::fs::read_dir(a.path().join(sub)).unwrap().map(|e| e.unwrap().file_name()).collect();
        names.sort();
        assert_eq!(names.len(), 6);
        for f in names {
            assert_eq!(std::fs::read(a.path().join(sub).join(&f)).unwrap(), std::fs::read(b.path().join(sub).join(&f)).unwrap());
        }
    }
    let loaded = load_dataset(a.path()).unwrap();
    let direct = synthesize(&spec).unwrap();
    for (l, d) in loaded.samples.iter().zip(&direct) {
        assert_eq!(l.pixels, d.pixels);
        for (x, y) in l.boxes.iter().zip(&d.boxes) {
            for k in 0..4 {
                assert!((x.bbox[k] - y.bbox[k]).abs() < 1e-3);
            }
        }
    }
    let other = synthesize(&SyntheticSpec { seed: 4, ..spec.clone() }).unwrap();
    assert_ne!(other[0].pixels, direct[0].pixels);
}

#[test]
fn checkpoint_round_trips_bitwise() {
    let data = dataset(4, 0);
    let mut t = Trainer::new(&small_cfg(0), &data).unwrap();
    t.run_epoch().unwrap();
    let ck = t.checkpoint();
    let dir = tempfile::tempdir().unwrap();
    let p1 = dir.path().join("a.bin");
    ck.save(&p1).unwrap();
    let back = Checkpoint::load(&p1).unwrap();
    assert_eq!(back, ck);
    let p2 = dir.path().join("b.bin");
    back.save(&p2).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
}

#[test]
fn version_mismatch_is_rejected() {
    let data = dataset(2, 0);
    let mut ck = Trainer::new(&small_cfg(0), &data).unwrap().checkpoint();
    ck.format_version = "0".into();
    let bytes = ck.to_bytes().unwrap();
    assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Checkpoint(_))));
    assert!(matches!(finetune(&small_cfg(0), &ck, &data, no_enhancement), Err(Error::Checkpoint(_))));
    assert!(matches!(Checkpoint::from_bytes(&bytes[..5]), Err(Error::Checkpoint(_))));
    assert_eq!(FORMAT_VERSION, "1");
}

#[test]
fn loss_falls_on_a_fixed_batch() {
    let data = dataset(4, 1);
    let mut t = Trainer::new(&small_cfg(1), &data).unwrap();
    let idx = [0, 1, 2, 3];
    let first = t.step(&idx, &[], 0.003).unwrap().total;
    let mut last = first;
    for _ in 0..19 {
        last = t.step(&idx, &[], 0.003).unwrap().total;
        assert!(last.is_finite());
    }
    assert!(last < first, "loss {first} -> {last}");
}

#[test]
fn seeded_runs_reproduce_history() {
    let data = dataset(8, 2);
    let cfg = TrainConfig {
        epochs: 3,
        eval_every: 1,
        hflip: true,
        ..small_cfg(5)
    };
    let run = || {
        let mut t = Trainer::new(&cfg, &data).unwrap();
        t.fit().unwrap();
        t.checkpoint()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.history.len(), 3);
    for (x, y) in a.history.iter().zip(&b.history) {
        assert!((x.loss - y.loss).abs() < 1e-6);
        assert!((x.map50.unwrap() - y.map50.unwrap()).abs() < 1e-6);
    }
    assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
}

#[test]
fn frozen_finetune_keeps_weights() {
    let data = dataset(4, 3);
    let base = Trainer::new(&small_cfg(0), &data).unwrap().checkpoint();
    let cfg = TrainConfig {
        freeze_prefixes: vec!["backbone".into(), "neck".into(), "head".into()],
        ..small_cfg(7)
    };
    let out = finetune(&cfg, &base, &data, no_enhancement).unwrap();
    assert!(out.skipped.is_empty());
    for (name, p) in out.checkpoint.store.iter() {
        if name.contains("running_") || name.contains("num_batches") {
            continue;
        }
        assert_eq!(p.tensor, base.store.get(name).unwrap().clone(), "{name}");
    }
}

#[test]
fn finetune_skips_exactly_the_mismatched_tensors() {
    let data = dataset(4, 3);
    let base = Trainer::new(&small_cfg(0), &data).unwrap().checkpoint();
    let cfg = TrainConfig {
        width_mult: 0.5,
        epochs: 0,
        ..small_cfg(0)
    };
    let out = finetune(&cfg, &base, &data, no_enhancement).unwrap();
    let wide = Trainer::new(&cfg, &data).unwrap().checkpoint();
    let mut expected: Vec<String> = base
        .store
        .iter()
        .filter(|(n, p)| wide.store.param(n).is_none_or(|q| q.tensor.shape() != p.tensor.shape()))
        .map(|(n, _)| n.clone())
        .chain(wide.store.iter().filter(|(n, _)| !base.store.contains(n)).map(|(n, _)| n.clone()))
        .collect();
    expected.sort();
    assert!(!expected.is_empty());
    assert_eq!(out.skipped, expected);
    for (name, p) in out.checkpoint.store.iter() {
        if !expected.contains(name) {
            assert_eq!(p.tensor, base.store.get(name).unwrap().clone(), "{name}");
        }
    }
}

#[test]
fn every_ablation_trains_and_evaluates() {
    let data = dataset(4, 4);
    for mask in 0..8u8 {
        let cfg = TrainConfig {
            use_c2f_repvitcamf: mask & 1 != 0,
            use_mscaf: mask & 2 != 0,
            use_kan_bottleneck: mask & 4 != 0,
            ..small_cfg(0)
        };
        let mut t = Trainer::new(&cfg, &data).unwrap();
        let rec = t.run_epoch().unwrap();
        assert!(rec.loss.is_finite());
        let r = evaluate_checkpoint(&t.checkpoint(), &data).unwrap();
        assert!((0.0..=1.0).contains(&r.map50));
    }
}

#[test]
fn bad_config_is_rejected() {
    let data = dataset(2, 0);
    for cfg in [
        TrainConfig { lr: 0.0, ..small_cfg(0) },
        TrainConfig { batch_size: 0, ..small_cfg(0) },
        TrainConfig { num_classes: 0, ..small_cfg(0) },
    ] {
        assert!(matches!(Trainer::new(&cfg, &data), Err(Error::InvalidArgument(_))));
    }
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.json");
    std::fs::write(&p, r#"{"epochs": 2, "learning_rate": 0.1}"#).unwrap();
    assert!(TrainConfig::from_json_file(&p).is_err());
    std::fs::write(&p, r#"{"epochs": 2, "lr": 0.01}"#).unwrap();
    assert_eq!(TrainConfig::from_json_file(&p).unwrap().epochs, 2);
}
