use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use image::ImageReader;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neckhead::GtBox;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub size: usize,
    pub classes: Vec<String>,
}

/// One grayscale image with its pixel-space boxes.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub pixels: Vec<u8>,
    pub boxes: Vec<GtBox>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub size: usize,
    pub classes: Vec<String>,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Images at `indices` as an N×1×S×S tensor scaled to [0, 1].
    pub fn batch(&self, indices: &[usize], hflip: &[bool]) -> Result<Tensor> {
        let s = self.size;
        let mut data = Vec::with_capacity(indices.len() * s * s);
        for (k, &i) in indices.iter().enumerate() {
            let px = &self.samples[i].pixels;
            let flip = hflip.get(k).copied().unwrap_or(false);
            for r in 0..s {
                for c in 0..s {
                    let cc = if flip { s - 1 - c } else { c };
                    data.push(f64::from(px[r * s + cc]) / 255.0);
                }
            }
        }
        Tensor::new(&[indices.len(), 1, s, s], data)
    }

    pub fn boxes(&self, indices: &[usize], hflip: &[bool]) -> Vec<Vec<GtBox>> {
        let s = self.size as f64;
        indices
            .iter()
            .enumerate()
            .map(|(k, &i)| {
                let flip = hflip.get(k).copied().unwrap_or(false);
                self.samples[i]
                    .boxes
                    .iter()
                    .map(|g| {
                        if flip {
                            GtBox {
                                bbox: [s - g.bbox[2], g.bbox[1], s - g.bbox[0], g.bbox[3]],
                                class_id: g.class_id,
                            }
                        } else {
                            *g
                        }
                    })
                    .collect()
            })
            .collect()
    }
}

/// One label line per box: `class cx cy w h`, normalized by the image size.
pub fn format_labels(boxes: &[GtBox], size: usize) -> String {
    let s = size as f64;
    let mut out = String::new();
    for g in boxes {
        let b = g.bbox;
        writeln!(
            out,
            "{} {:.6} {:.6} {:.6} {:.6}",
            g.class_id,
            (b[0] + b[2]) / 2.0 / s,
            (b[1] + b[3]) / 2.0 / s,
            (b[2] - b[0]) / s,
            (b[3] - b[1]) / s
        )
        .expect("write to string");
    }
    out
}

pub fn write_labels(path: &Path, boxes: &[GtBox], size: usize) -> Result<()> {
    std::fs::write(path, format_labels(boxes, size)).map_err(|e| Error::io(path, e))
}

/// Parses a label file; `n_classes` bounds the class id.
pub fn parse_labels(text: &str, file: &Path, size: usize, n_classes: usize) -> Result<Vec<GtBox>> {
    let err = |line: usize, msg: String| Error::Label {
        file: file.to_path_buf(),
        line,
        msg,
    };
    let s = size as f64;
    let mut boxes = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split(' ').collect();
        if fields.len() != 5 {
            return Err(err(line, format!("expected 5 fields, found {}", fields.len())));
        }
        let class_id: usize = fields[0]
            .parse()
            .map_err(|_| err(line, format!("bad class id {:?}", fields[0])))?;
        if class_id >= n_classes {
            return Err(err(line, format!("class {class_id} not in the {n_classes} manifest classes")));
        }
        let mut v = [0.0f64; 4];
        for (k, f) in fields[1..].iter().enumerate() {
            v[k] = f.parse().map_err(|_| err(line, format!("bad number {f:?}")))?;
            if !(0.0..=1.0).contains(&v[k]) {
                return Err(err(line, format!("coordinate {f} outside [0, 1]")));
            }
        }
        let [cx, cy, w, h] = v;
        let tol = 1e-6;
        if w <= 0.0 || h <= 0.0 || cx - w / 2.0 < -tol || cy - h / 2.0 < -tol || cx + w / 2.0 > 1.0 + tol || cy + h / 2.0 > 1.0 + tol {
            return Err(err(line, format!("box {cx} {cy} {w} {h} leaves the image")));
        }
        boxes.push(GtBox {
            bbox: [
                ((cx - w / 2.0) * s).max(0.0),
                ((cy - h / 2.0) * s).max(0.0),
                ((cx + w / 2.0) * s).min(s),
                ((cy + h / 2.0) * s).min(s),
            ],
            class_id,
        });
    }
    Ok(boxes)
}

fn read_gray(path: &Path, size: usize) -> Result<Vec<u8>> {
    let img = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()?
        .into_luma8();
    if (img.width() as usize, img.height() as usize) != (size, size) {
        return Err(Error::Data(format!(
            "{}: {}×{} image in a dataset of size {size}",
            path.display(),
            img.width(),
            img.height()
        )));
    }
    Ok(img.into_raw())
}

/// Loads `images/*.png` with their `labels/*.txt`, sorted by file name.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let mpath = dir.join("manifest.json");
    let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    let images = dir.join("images");
    let mut files: Vec<PathBuf> = std::fs::read_dir(&images)
        .map_err(|e| Error::io(&images, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "png"))
        .collect();
    files.sort();
    let mut samples = Vec::with_capacity(files.len());
    for f in files {
        let id = f.file_stem().expect("png has a stem").to_string_lossy().into_owned();
        let lpath = dir.join("labels").join(format!("{id}.txt"));
        let ltext = std::fs::read_to_string(&lpath).map_err(|e| Error::io(&lpath, e))?;
        samples.push(Sample {
            pixels: read_gray(&f, manifest.size)?,
            boxes: parse_labels(&ltext, &lpath, manifest.size, manifest.classes.len())?,
            id,
        });
    }
    Ok(Dataset {
        size: manifest.size,
        classes: manifest.classes,
        samples,
    })
}
