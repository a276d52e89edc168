//! Parameter and multiply-add counts for each combination of the three module flags.
//!
//! `cargo run --release --example ablation_cost`

use cployo::datatrain::{Detector, ModelConfig};
use cployo::nnkit::ParamStore;

fn main() -> cployo::Result<()> {
    println!("{:<10} {:<6} {:<4} {:>10} {:>12} {:>12}", "repvitcamf", "mscaf", "kan", "params", "mult-adds", "fused m-a");
    for mask in 0..8u8 {
        let cfg = ModelConfig {
            use_c2f_repvitcamf: mask & 1 != 0,
            use_mscaf: mask & 2 != 0,
            use_kan_bottleneck: mask & 4 != 0,
            ..ModelConfig::default()
        };
        let mut store = ParamStore::new();
        let mut det = Detector::new(&mut store, 0, cfg.clone())?;
        let train = det.cost_report(&store, 64)?;
        det.fuse(&mut store)?;
        let fused = det.cost_report(&store, 64)?;
        let (t, f) = (train.last().expect("total row"), fused.last().expect("total row"));
        println!(
            "{:<10} {:<6} {:<4} {:>10} {:>12} {:>12}",
            cfg.use_c2f_repvitcamf, cfg.use_mscaf, cfg.use_kan_bottleneck, t.params, t.mults_adds, f.mults_adds
        );
    }
    Ok(())
}
