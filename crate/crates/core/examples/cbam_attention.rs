//! Channel and spatial attention gates of a CBAM block, and the pixel-wise PSA gate.
//!
//! `cargo run --release --example cbam_attention`

use cployo::attention::{Cbam, Psa};
use cployo::nnkit::{Ctx, ParamInit, ParamStore, Tape};
use cployo::Tensor;
use rand::SeedableRng;

fn main() -> cployo::Result<()> {
    let mut store = ParamStore::new();
    let mut init = ParamInit::new(&mut store, 4);
    let cbam = Cbam::new(&mut init, "cbam", 16, 4)?;
    let psa = Psa::new(&mut init, "psa", 16);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let mut x = Tensor::randn(&[1, 16, 8, 8], 1.0, &mut rng);
    // one strongly active channel and one hot spot
    for k in 0..64 {
        x.data_mut()[3 * 64 + k] += 3.0;
    }
    for c in 0..16 {
        x.data_mut()[c * 64 + 2 * 8 + 5] += 4.0;
    }

    let tape = Tape::new();
    let cx = Ctx::new(&tape, &store, false);
    let f = tape.constant(x);
    let mc = cbam.channel_attention(&cx, f)?;
    let ms = cbam.spatial_attention(&cx, f)?;
    let out = cbam.forward(&cx, f)?;
    let gate = psa.gate(&cx, f)?;

    let mc = mc.value();
    let gates: Vec<String> = mc.data().iter().map(|v| format!("{v:.2}")).collect();
    println!("channel gate (hidden width {}): {}", cbam.hidden(), gates.join(" "));
    let ms = ms.value();
    println!("spatial gate:");
    for i in 0..8 {
        let row: Vec<String> = (0..8).map(|j| format!("{:.2}", ms.at4(0, 0, i, j))).collect();
        println!("  {}", row.join(" "));
    }
    let gate = gate.value();
    let (lo, hi) = gate.data().iter().fold((1.0f64, 0.0f64), |(l, h), &v| (l.min(v), h.max(v)));
    println!("CBAM output {:?}; PSA gate range [{lo:.3}, {hi:.3}]", out.value().shape());
    Ok(())
}
