//! CT slice ingestion and lung-parenchyma segmentation.
//!
//! Lung tissue is dark on CT, so a pixel belongs to the foreground when its
//! value is at or below the threshold.

pub mod io;
pub mod kmeans;
pub mod morphology;
pub mod otsu;
pub mod phantom;
pub mod pipeline;

pub use io::{read_slice, write_mask_png, write_slice_png, HuRescale};
pub use kmeans::kmeans_segment;
pub use morphology::{area_open, binarize, clear_border_components, fill_holes, label_components, morph, MorphOp};
pub use otsu::{histogram, otsu_threshold, otsu_threshold_hist};
pub use phantom::{phantom, PhantomSpec};
pub use pipeline::{apply_mask, dice, segment_lung, SegmentationConfig};

use crate::error::{Error, Result};

pub const MIN_SIDE: usize = 8;

/// Grayscale slice, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct CtSlice {
    pub h: usize,
    pub w: usize,
    pub pixels: Vec<f64>,
    pub spacing_mm: Option<(f64, f64)>,
    pub source_id: String,
}

impl CtSlice {
    pub fn new(h: usize, w: usize, pixels: Vec<f64>, source_id: impl Into<String>) -> Result<Self> {
        if h < MIN_SIDE || w < MIN_SIDE {
            return Err(Error::invalid(format!("slice {h}×{w} is smaller than {MIN_SIDE}×{MIN_SIDE}")));
        }
        if pixels.len() != h * w {
            return Err(Error::shape(format!("{} pixels for a {h}×{w} slice", pixels.len())));
        }
        if let Some(i) = pixels.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("pixel {i} of slice")));
        }
        Ok(CtSlice {
            h,
            w,
            pixels,
            spacing_mm: None,
            source_id: source_id.into(),
        })
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.pixels[r * self.w + c]
    }

    /// Levels 0–255. Integer images already in that range are kept as is;
    /// anything else is mapped linearly from its min–max range.
    pub fn quantize(&self) -> Vec<u8> {
        let integral = self.pixels.iter().all(|&v| v.fract() == 0.0 && (0.0..=255.0).contains(&v));
        if integral {
            return self.pixels.iter().map(|&v| v as u8).collect();
        }
        let lo = self.pixels.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self.pixels.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi <= lo {
            return vec![0; self.pixels.len()];
        }
        self.pixels
            .iter()
            .map(|&v| ((v - lo) / (hi - lo) * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    }

    pub fn to_8bit(&self) -> CtSlice {
        CtSlice {
            h: self.h,
            w: self.w,
            pixels: self.quantize().into_iter().map(f64::from).collect(),
            spacing_mm: self.spacing_mm,
            source_id: self.source_id.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    pub h: usize,
    pub w: usize,
    pub bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(h: usize, w: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != h * w {
            return Err(Error::shape(format!("{} bits for a {h}×{w} mask", bits.len())));
        }
        Ok(BinaryMask { h, w, bits })
    }

    pub fn empty(h: usize, w: usize) -> Self {
        BinaryMask {
            h,
            w,
            bits: vec![false; h * w],
        }
    }

    pub fn full(h: usize, w: usize) -> Self {
        BinaryMask {
            h,
            w,
            bits: vec![true; h * w],
        }
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.bits[r * self.w + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        self.bits[r * self.w + c] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn not(&self) -> BinaryMask {
        BinaryMask {
            h: self.h,
            w: self.w,
            bits: self.bits.iter().map(|b| !b).collect(),
        }
    }
}
