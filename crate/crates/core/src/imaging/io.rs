use std::path::Path;

use image::{DynamicImage, GrayImage, ImageReader};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{BinaryMask, CtSlice};

/// Linear rescale to Hounsfield units, read from a `.json` sidecar.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HuRescale {
    pub slope: f64,
    pub intercept: f64,
}

/// Reads an 8- or 16-bit grayscale PNG or PGM. A sidecar with the same stem
/// and a `.json` extension, when present, rescales pixels to HU.
pub fn read_slice(path: &Path) -> Result<CtSlice> {
    let img = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let pixels: Vec<f64> = match img {
        DynamicImage::ImageLuma8(b) => b.into_raw().into_iter().map(f64::from).collect(),
        DynamicImage::ImageLuma16(b) => b.into_raw().into_iter().map(f64::from).collect(),
        other => {
            return Err(Error::Data(format!(
                "{}: expected a grayscale image, found {:?}",
                path.display(),
                other.color()
            )))
        }
    };
    let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let mut slice = CtSlice::new(h, w, pixels, id)?;
    let sidecar = path.with_extension("json");
    if sidecar.is_file() {
        let text = std::fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
        let r: HuRescale = serde_json::from_str(&text)?;
        for p in &mut slice.pixels {
            *p = *p * r.slope + r.intercept;
        }
    }
    Ok(slice)
}

/// Writes the 8-bit quantization of a slice as PNG.
pub fn write_slice_png(slice: &CtSlice, path: &Path) -> Result<()> {
    let img = GrayImage::from_raw(slice.w as u32, slice.h as u32, slice.quantize()).expect("buffer matches size");
    img.save(path)?;
    Ok(())
}

/// Writes a mask as PNG with values 0 and 255.
pub fn write_mask_png(mask: &BinaryMask, path: &Path) -> Result<()> {
    let raw = mask.bits.iter().map(|&b| if b { 255 } else { 0 }).collect();
    let img = GrayImage::from_raw(mask.w as u32, mask.h as u32, raw).expect("buffer matches size");
    img.save(path)?;
    Ok(())
}
