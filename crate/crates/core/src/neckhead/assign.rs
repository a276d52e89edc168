use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neckhead::boxes::BBox;

/// Scale boundaries on `√(w·h)` at the reference image size, in pixels.
pub const SCALE_BOUNDS: [f64; 2] = [64.0, 128.0];
pub const REFERENCE_SIZE: f64 = 256.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    pub bbox: BBox,
    pub class_id: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LevelShape {
    pub stride: usize,
    pub h: usize,
    pub w: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Assigned {
    /// Index of the ground truth within its image.
    pub gt: usize,
    pub bbox: BBox,
    pub class_id: usize,
}

/// Per-level cell assignments, indexed `b·H·W + i·W + j`.
#[derive(Clone, Debug, PartialEq)]
pub struct Targets {
    pub batch: usize,
    pub levels: Vec<LevelShape>,
    pub cells: Vec<Vec<Option<Assigned>>>,
}

impl Targets {
    pub fn positives(&self) -> usize {
        self.cells.iter().flatten().filter(|c| c.is_some()).count()
    }

    pub fn total_cells(&self) -> usize {
        self.cells.iter().map(Vec::len).sum()
    }
}

/// Pyramid level for a box of the given size on an image of `image_size`.
pub fn level_for(bbox: &BBox, image_size: (usize, usize), n_levels: usize) -> usize {
    let size = ((bbox[2] - bbox[0]) * (bbox[3] - bbox[1])).sqrt();
    let scale = ((image_size.0 * image_size.1) as f64).sqrt() / REFERENCE_SIZE;
    let level = SCALE_BOUNDS.iter().filter(|&&b| size > b * scale).count();
    level.min(n_levels.saturating_sub(1))
}

fn check_gt(g: &GtBox, image_size: (usize, usize)) -> Result<()> {
    let (h, w) = (image_size.0 as f64, image_size.1 as f64);
    let b = g.bbox;
    if !b.iter().all(|v| v.is_finite()) || b[0] < 0.0 || b[1] < 0.0 || b[2] > w || b[3] > h || b[0] >= b[2] || b[1] >= b[3]
    {
        return Err(Error::invalid(format!(
            "ground-truth box {b:?} is not inside the {}×{} image",
            image_size.1, image_size.0
        )));
    }
    Ok(())
}

/// Assigns each ground truth to one level and the 3×3 cells around its centre.
///
/// A cell claimed by several boxes keeps the one whose centre is nearest to
/// the cell centre, the lower index on ties.
pub fn assign_targets(gts: &[Vec<GtBox>], image_size: (usize, usize), levels: &[LevelShape]) -> Result<Targets> {
    if levels.is_empty() {
        return Err(Error::invalid("no pyramid levels"));
    }
    let batch = gts.len();
    let mut cells: Vec<Vec<Option<Assigned>>> = levels.iter().map(|l| vec![None; batch * l.h * l.w]).collect();
    let mut dist: Vec<Vec<f64>> = levels.iter().map(|l| vec![f64::INFINITY; batch * l.h * l.w]).collect();
    for (b, image_gts) in gts.iter().enumerate() {
        for (gi, g) in image_gts.iter().enumerate() {
            check_gt(g, image_size)?;
            let li = level_for(&g.bbox, image_size, levels.len());
            let l = levels[li];
            let s = l.stride as f64;
            let (cx, cy) = ((g.bbox[0] + g.bbox[2]) / 2.0, (g.bbox[1] + g.bbox[3]) / 2.0);
            let ci = ((cy / s).floor() as usize).min(l.h - 1);
            let cj = ((cx / s).floor() as usize).min(l.w - 1);
            for i in ci.saturating_sub(1)..=(ci + 1).min(l.h - 1) {
                for j in cj.saturating_sub(1)..=(cj + 1).min(l.w - 1) {
                    let k = b * l.h * l.w + i * l.w + j;
                    let d = ((j as f64 + 0.5) * s - cx).powi(2) + ((i as f64 + 0.5) * s - cy).powi(2);
                    if d < dist[li][k] {
                        dist[li][k] = d;
                        cells[li][k] = Some(Assigned {
                            gt: gi,
                            bbox: g.bbox,
                            class_id: g.class_id,
                        });
                    }
                }
            }
        }
    }
    Ok(Targets {
        batch,
        levels: levels.to_vec(),
        cells,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn levels64() -> Vec<LevelShape> {
        [8, 16, 32]
            .iter()
            .map(|&s| LevelShape {
                stride: s,
                h: 64 / s,
                w: 64 / s,
            })
            .collect()
    }

    #[test]
    fn centered_small_box_goes_to_stride_eight() {
        let g = GtBox {
            bbox: [24.0, 24.0, 40.0, 40.0],
            class_id: 0,
        };
        let t = assign_targets(&[vec![g]], (64, 64), &levels64()).unwrap();
        assert_eq!(t.cells[0].iter().filter(|c| c.is_some()).count(), 9);
        assert_eq!(t.positives(), 9);
    }

    #[test]
    fn empty_ground_truth_is_all_negative() {
        let t = assign_targets(&[vec![], vec![]], (64, 64), &levels64()).unwrap();
        assert_eq!(t.positives(), 0);
        assert_eq!(t.total_cells(), 2 * (64 + 16 + 4));
    }

    #[test]
    fn box_outside_image_is_rejected() {
        let g = GtBox {
            bbox: [50.0, 10.0, 70.0, 20.0],
            class_id: 0,
        };
        assert!(assign_targets(&[vec![g]], (64, 64), &levels64()).is_err());
    }
}
