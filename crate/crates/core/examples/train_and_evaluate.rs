//! Trains the small detector on synthetic nodules, then fuses and evaluates it.
//!
//! `cargo run --release --example train_and_evaluate -- [epochs]`

use cployo::datatrain::{evaluate_checkpoint, fuse_checkpoint, synthesize, Dataset, SyntheticSpec, TrainConfig, Trainer};

fn main() -> cployo::Result<()> {
    let epochs: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(40);
    let spec = SyntheticSpec {
        n_images: 32,
        ..SyntheticSpec::default()
    };
    let data = Dataset {
        size: spec.size,
        classes: vec!["nodule".into()],
        samples: synthesize(&spec)?,
    };
    let cfg = TrainConfig {
        epochs,
        eval_every: 10,
        target_map50: Some(0.9),
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(&cfg, &data)?;
    while trainer.epoch() < cfg.epochs {
        let rec = trainer.run_epoch()?;
        let map = rec.map50.map(|m| format!("  train mAP50 {m:.3}")).unwrap_or_default();
        println!("epoch {:>3}  loss {:.4}  (box {:.3} obj {:.3}){map}", rec.epoch, rec.loss, rec.box_ciou, rec.obj_bce);
        if rec.map50.is_some_and(|m| m >= 0.9) {
            break;
        }
    }

    let ckpt = trainer.checkpoint();
    let fused = fuse_checkpoint(&ckpt)?;
    let r = evaluate_checkpoint(&fused, &data)?;
    println!(
        "\nfused model: {} -> {} params; P {:.3} R {:.3} mAP50 {:.3} mAP50-95 {:.3}",
        ckpt.store.param_count(""),
        fused.store.param_count(""),
        r.precision,
        r.recall,
        r.map50,
        r.map50_95
    );
    Ok(())
}
