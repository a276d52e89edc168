//! B-spline bases and a KAN layer applied per pixel across channels.
//!
//! `cargo run --release --example kan_layer`

use cployo::kan::{bspline_basis, KanBottleneck, KanLayer, KanSpec, SplineGrid};
use cployo::nnkit::ops::sum;
use cployo::nnkit::{Ctx, ParamInit, ParamStore, Tape};
use cployo::Tensor;
use rand::SeedableRng;

fn main() -> cployo::Result<()> {
    let grid = SplineGrid::new(5, 3, 2.0)?;
    let xs = [-2.0, -0.7, 0.0, 1.3, 2.0];
    for (x, b) in xs.iter().zip(bspline_basis(&xs, &grid)) {
        let row: Vec<String> = b.iter().map(|v| format!("{v:.3}")).collect();
        println!("x={x:>5.2}  B = [{}]  sum {:.12}", row.join(" "), b.iter().sum::<f64>());
    }

    let mut store = ParamStore::new();
    let mut init = ParamInit::new(&mut store, 0);
    let layer = KanLayer::new(&mut init, "kan", KanSpec::new(8, 4))?;
    let bottleneck = KanBottleneck::new(&mut init, "kb", 8, true)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::randn(&[1, 8, 6, 6], 1.0, &mut rng);

    let tape = Tape::new();
    let cx = Ctx::new(&tape, &store, true);
    let xv = tape.constant(x);
    let y = layer.forward(&cx, xv)?;
    let z = bottleneck.forward(&cx, xv)?;
    println!("\nKanLayer 8->4: {:?} -> {:?}", xv.value().shape(), y.value().shape());
    println!("KAN-Bottleneck (residual): {:?} -> {:?}", xv.value().shape(), z.value().shape());

    let mut grads = tape.backward(sum(z))?;
    let g = cx.param_grads(&mut grads);
    for (name, t) in g.iter().filter(|(n, _)| n.ends_with("coeff")) {
        let norm = t.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        println!("d loss / d {name}: shape {:?}, norm {norm:.4}", t.shape());
    }
    Ok(())
}
