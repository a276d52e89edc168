//! Writes a synthetic nodule dataset to disk and reads it back.
//!
//! `cargo run --release --example synthetic_dataset -- [out_dir]`

use std::path::PathBuf;

use cployo::datatrain::{generate_synthetic, load_dataset, SyntheticSpec};

fn main() -> cployo::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("cployo-synthetic"));
    let spec = SyntheticSpec {
        n_images: 12,
        size: 64,
        seed: 7,
        ..SyntheticSpec::default()
    };
    generate_synthetic(&spec, &out)?;
    let data = load_dataset(&out)?;
    println!("{} images of {}x{} in {}", data.len(), data.size, data.size, out.display());
    for s in data.samples.iter().take(5) {
        let boxes: Vec<String> = s
            .boxes
            .iter()
            .map(|g| format!("[{:.1} {:.1} {:.1} {:.1}]", g.bbox[0], g.bbox[1], g.bbox[2], g.bbox[3]))
            .collect();
        println!("  {}: {} nodules {}", s.id, s.boxes.len(), boxes.join(" "));
    }
    let total: usize = data.samples.iter().map(|s| s.boxes.len()).sum();
    println!("{total} boxes in total");
    Ok(())
}
