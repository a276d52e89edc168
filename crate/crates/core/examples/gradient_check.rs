//! Finite-difference check of every differentiable block against the tape.
//!
//! `cargo run --release --example gradient_check -- [seeds]`

use cployo::verify::{check_block, GRAD_BLOCKS, GRAD_TOL};

fn main() -> cployo::Result<()> {
    let seeds: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(3);
    let t0 = std::time::Instant::now();
    let mut worst = 0.0f64;
    for block in GRAD_BLOCKS {
        let reports = (0..seeds).map(|s| check_block(block, s)).collect::<cployo::Result<Vec<_>>>()?;
        let r = reports.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error)).expect("at least one seed");
        worst = worst.max(r.max_rel_error);
        println!(
            "{block:<15} {:>3} tensors  max rel err {:.2e}  (seed {}, {})",
            r.tensors_checked, r.max_rel_error, r.seed, r.worst_tensor
        );
    }
    let verdict = if worst < GRAD_TOL { "ok" } else { "above tolerance" };
    println!("worst {worst:.2e} vs {GRAD_TOL:e}: {verdict} in {:.1?}", t0.elapsed());
    Ok(())
}
