use std::path::Path;

use image::GrayImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datatrain::dataset::{write_labels, Manifest, Sample};
use crate::error::{Error, Result};
use crate::neckhead::GtBox;

pub const TISSUE: f64 = 110.0;
pub const LUNG_FIELD: f64 = 40.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_images: usize,
    pub size: usize,
    /// Inclusive range of nodules per image.
    pub nodules_per_image: (usize, usize),
    pub radius_px: (f64, f64),
    /// Brightness of a nodule above the lung field.
    pub contrast: (f64, f64),
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_images: 32,
            size: 64,
            nodules_per_image: (0, 3),
            radius_px: (2.0, 8.0),
            contrast: (80.0, 140.0),
            noise_sigma: 6.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let (r0, r1) = self.radius_px;
        if !(r0 >= 2.0 && r1 >= r0) {
            return Err(Error::invalid("radius range must satisfy 2 ≤ min ≤ max"));
        }
        if self.size < 32 || self.size % 32 != 0 {
            return Err(Error::invalid(format!("image size {} must be a positive multiple of 32", self.size)));
        }
        if self.nodules_per_image.0 > self.nodules_per_image.1 || self.contrast.0 > self.contrast.1 {
            return Err(Error::invalid("ranges must be ordered"));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::invalid("noise_sigma must be non-negative"));
        }
        Ok(())
    }
}

/// Renders one image: a dark elliptical lung field in brighter tissue, noise,
/// and bright disks with a one-pixel soft edge. Returns pixels and boxes.
pub fn render(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Result<(Vec<u8>, Vec<GtBox>)> {
    let n = spec.size;
    let s = n as f64;
    let (fa, fb) = (rng.random_range(0.44..0.48) * s, rng.random_range(0.42..0.47) * s);
    let (fx, fy) = (s / 2.0, s / 2.0);
    let in_field = |x: f64, y: f64| ((x - fx) / fa).powi(2) + ((y - fy) / fb).powi(2) <= 1.0;
    let mut img: Vec<f64> = (0..n * n)
        .map(|p| {
            let (x, y) = ((p % n) as f64 + 0.5, (p / n) as f64 + 0.5);
            if in_field(x, y) {
                LUNG_FIELD
            } else {
                TISSUE
            }
        })
        .collect();

    let count = rng.random_range(spec.nodules_per_image.0..=spec.nodules_per_image.1);
    let mut nodules: Vec<(f64, f64, f64, f64)> = Vec::new();
    let mut attempts = 0;
    while nodules.len() < count && attempts < 1000 {
        attempts += 1;
        let r = rng.random_range(spec.radius_px.0..=spec.radius_px.1);
        let cx = rng.random_range(r + 1.0..s - r - 1.0);
        let cy = rng.random_range(r + 1.0..s - r - 1.0);
        let margin = r + 2.0;
        let fits = [(-margin, 0.0), (margin, 0.0), (0.0, -margin), (0.0, margin)]
            .iter()
            .chain(&[(-0.7 * margin, -0.7 * margin), (0.7 * margin, 0.7 * margin), (-0.7 * margin, 0.7 * margin), (0.7 * margin, -0.7 * margin)])
            .all(|&(dx, dy)| in_field(cx + dx, cy + dy));
        let apart = nodules
            .iter()
            .all(|&(ox, oy, orad, _)| ((ox - cx).powi(2) + (oy - cy).powi(2)).sqrt() > r + orad + 3.0);
        if fits && apart {
            let c = rng.random_range(spec.contrast.0..=spec.contrast.1);
            nodules.push((cx, cy, r, c));
        }
    }
    for &(cx, cy, r, c) in &nodules {
        for (p, v) in img.iter_mut().enumerate() {
            let (x, y) = ((p % n) as f64 + 0.5, (p / n) as f64 + 0.5);
            let d = ((x - cx).powi(2) + (y - cy).powi(2)).sqrt();
            *v += c * (r + 0.5 - d).clamp(0.0, 1.0);
        }
    }
    let normal = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::invalid(e.to_string()))?;
    let pixels = img
        .iter()
        .map(|&v| (v + normal.sample(rng)).round().clamp(0.0, 255.0) as u8)
        .collect();
    let boxes = nodules
        .iter()
        .map(|&(cx, cy, r, _)| GtBox {
            bbox: [cx - r, cy - r, cx + r, cy + r],
            class_id: 0,
        })
        .collect();
    Ok((pixels, boxes))
}

/// In-memory synthetic samples, deterministic per seed.
pub fn synthesize(spec: &SyntheticSpec) -> Result<Vec<Sample>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    (0..spec.n_images)
        .map(|i| {
            let (pixels, boxes) = render(spec, &mut rng)?;
            Ok(Sample {
                id: format!("img_{i:04}"),
                pixels,
                boxes,
            })
        })
        .collect()
}

/// Writes `images/*.png`, `labels/*.txt` and `manifest.json` under `dir`.
pub fn generate_synthetic(spec: &SyntheticSpec, dir: &Path) -> Result<Vec<Sample>> {
    let samples = synthesize(spec)?;
    let images = dir.join("images");
    let labels = dir.join("labels");
    for d in [&images, &labels] {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    for s in &samples {
        let img = GrayImage::from_raw(spec.size as u32, spec.size as u32, s.pixels.clone()).expect("size matches");
        img.save(images.join(format!("{}.png", s.id)))?;
        write_labels(&labels.join(format!("{}.txt", s.id)), &s.boxes, spec.size)?;
    }
    let manifest = Manifest {
        size: spec.size,
        classes: vec!["nodule".to_string()],
    };
    let path = dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(samples)
}
