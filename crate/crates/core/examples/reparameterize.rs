//! Folds the training-time RepViT branches into single convolutions and
//! checks that the fused blocks compute the same function.
//!
//! `cargo run --release --example reparameterize`

use cployo::datatrain::{Detector, ModelConfig};
use cployo::nnkit::ParamStore;
use cployo::verify::{fusion_equivalence, perturb, FUSION_BLOCKS};
use cployo::Tensor;
use rand::{Rng, SeedableRng};

fn main() -> cployo::Result<()> {
    for block in FUSION_BLOCKS {
        let r = fusion_equivalence(block, 50, 7)?;
        let f32_note = r.max_abs_diff_f32.map(|d| format!(", f32 {d:.1e}")).unwrap_or_default();
        println!(
            "{block:<11} params {:>7} -> {:<7} max |diff| f64 {:.1e}{f32_note}",
            r.params_before, r.params_after, r.max_abs_diff_f64
        );
    }

    let mut store = ParamStore::new();
    let mut det = Detector::new(&mut store, 0, ModelConfig::default())?;
    perturb(&mut store, 1, 0.1);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::new(&[2, 1, 64, 64], (0..2 * 64 * 64).map(|_| rng.random::<f64>()).collect())?;
    let before = det.raw_eval(&store, &x)?;
    let cost_before = det.cost_report(&store, 64)?;
    let params = store.param_count("");
    let units = det.fuse(&mut store)?;
    let after = det.raw_eval(&store, &x)?;
    let cost_after = det.cost_report(&store, 64)?;
    let diff = before
        .iter()
        .zip(&after)
        .flat_map(|(a, b)| a.data().iter().zip(b.data()).map(|(p, q)| (p - q).abs()))
        .fold(0.0, f64::max);
    println!(
        "\nwhole detector: {units} units fused, params {params} -> {}, head outputs differ by at most {diff:.1e}",
        store.param_count("")
    );
    for (b, a) in cost_before.iter().zip(&cost_after) {
        println!("  {:<9} {:>9} -> {:<9} mult-adds", b.block, b.mults_adds, a.mults_adds);
    }
    Ok(())
}
