use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::morphology::{area_open, binarize, clear_border_components, fill_holes, morph, MorphOp};
use crate::imaging::otsu::otsu_threshold;
use crate::imaging::{BinaryMask, CtSlice};

/// Noise and second-pass area thresholds at the 512×512 reference size.
pub const REFERENCE_NOISE_AREA: f64 = 64.0;
pub const REFERENCE_SECOND_AREA: f64 = 512.0;
pub const REFERENCE_PIXELS: f64 = 512.0 * 512.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentationConfig {
    /// Area-opening threshold of the noise pass.
    pub min_area_px: usize,
    /// Area-opening threshold applied after hole filling.
    pub second_area_px: usize,
    pub kmeans_k: usize,
    /// Radius of an optional opening after hole filling; 0 disables it.
    pub morph_radius_px: usize,
    pub border_clear: bool,
}

impl SegmentationConfig {
    /// Defaults with both area thresholds scaled by image area.
    pub fn for_size(h: usize, w: usize) -> Self {
        let scale = (h * w) as f64 / REFERENCE_PIXELS;
        SegmentationConfig {
            min_area_px: ((REFERENCE_NOISE_AREA * scale).round() as usize).max(1),
            second_area_px: ((REFERENCE_SECOND_AREA * scale).round() as usize).max(1),
            kmeans_k: 2,
            morph_radius_px: 0,
            border_clear: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.min_area_px == 0 || self.second_area_px == 0 {
            return Err(Error::invalid("area thresholds must be at least 1"));
        }
        if self.kmeans_k < 2 {
            return Err(Error::invalid("kmeans_k must be at least 2"));
        }
        Ok(())
    }
}

/// Otsu, binarize, clear border, area open, fill holes, area open again.
///
/// A constant slice has no threshold and yields an empty mask.
pub fn segment_lung(image: &CtSlice, cfg: &SegmentationConfig) -> Result<BinaryMask> {
    cfg.validate()?;
    let q = image.to_8bit();
    let t = match otsu_threshold(&q) {
        Ok(t) => t,
        Err(Error::DegenerateHistogram) => return Ok(BinaryMask::empty(image.h, image.w)),
        Err(e) => return Err(e),
    };
    let mut m = binarize(&q, f64::from(t));
    if cfg.border_clear {
        m = clear_border_components(&m);
    }
    m = area_open(&m, cfg.min_area_px);
    m = fill_holes(&m);
    if cfg.morph_radius_px > 0 {
        m = morph(&morph(&m, MorphOp::Erode, cfg.morph_radius_px), MorphOp::Dilate, cfg.morph_radius_px);
    }
    Ok(area_open(&m, cfg.second_area_px))
}

/// Keeps pixels under the mask, zeroes the rest.
pub fn apply_mask(image: &CtSlice, mask: &BinaryMask) -> Result<CtSlice> {
    if (image.h, image.w) != (mask.h, mask.w) {
        return Err(Error::shape(format!(
            "mask {}×{} does not match slice {}×{}",
            mask.h, mask.w, image.h, image.w
        )));
    }
    let mut out = image.clone();
    for (p, &b) in out.pixels.iter_mut().zip(&mask.bits) {
        if !b {
            *p = 0.0;
        }
    }
    Ok(out)
}

/// Sørensen–Dice overlap; two empty masks score 1.
pub fn dice(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    if (a.h, a.w) != (b.h, b.w) {
        return Err(Error::shape("dice of masks with different shapes"));
    }
    let inter = a.bits.iter().zip(&b.bits).filter(|(x, y)| **x && **y).count();
    let total = a.count() + b.count();
    Ok(if total == 0 { 1.0 } else { 2.0 * inter as f64 / total as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_bright_slice_gives_empty_mask() {
        let img = CtSlice::new(16, 16, vec![250.0; 256], "bright").unwrap();
        let m = segment_lung(&img, &SegmentationConfig::for_size(16, 16)).unwrap();
        assert_eq!(m.count(), 0);
    }

    #[test]
    fn apply_half_mask() {
        let img = CtSlice::new(8, 8, (0..64).map(|v| v as f64 + 1.0).collect(), "ramp").unwrap();
        let mut m = BinaryMask::empty(8, 8);
        for r in 0..8 {
            for c in 0..4 {
                m.set(r, c, true);
            }
        }
        let out = apply_mask(&img, &m).unwrap();
        for r in 0..8 {
            for c in 0..8 {
                assert_eq!(out.at(r, c), if c < 4 { img.at(r, c) } else { 0.0 });
            }
        }
        assert!(apply_mask(&img, &BinaryMask::empty(9, 8)).is_err());
    }

    #[test]
    fn default_areas_scale_with_image() {
        let c = SegmentationConfig::for_size(512, 512);
        assert_eq!((c.min_area_px, c.second_area_px), (64, 512));
        let c = SegmentationConfig::for_size(128, 128);
        assert_eq!((c.min_area_px, c.second_area_px), (4, 32));
    }
}
