//! Segments synthetic chest phantoms and scores them against the known lung mask.
//!
//! `cargo run --release --example segment_phantom`

use cployo::imaging::{apply_mask, dice, kmeans_segment, otsu_threshold, phantom, segment_lung, PhantomSpec, SegmentationConfig};

fn main() -> cployo::Result<()> {
    let cfg = SegmentationConfig::for_size(128, 128);
    for (seed, speckles) in [(0, 0), (1, 0), (2, 40), (3, 40)] {
        let spec = PhantomSpec {
            speckles,
            ..PhantomSpec::new(128, seed)
        };
        let (img, truth) = phantom(&spec)?;
        let t = otsu_threshold(&img)?;
        let mask = segment_lung(&img, &cfg)?;
        let km = kmeans_segment(&img, 2, seed)?;
        let lung = apply_mask(&img, &mask)?;
        let kept = lung.pixels.iter().filter(|&&v| v != 0.0).count();
        println!(
            "seed {seed} speckles {speckles:>2}: otsu t={t:>3}  dice {:.4}  dark k-means cluster dice {:.4}  {} lung px ({kept} non-zero)",
            dice(&mask, &truth)?,
            dice(&km, &truth)?,
            mask.count(),
        );
    }
    Ok(())
}
