use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neckhead::head::{BOX_CHANNELS, OBJ_CHANNEL};
use crate::nnkit::ops::sigmoid_scalar;
use crate::tensor::Tensor;

/// Corner box `[x1, y1, x2, y2]` in pixels.
pub type BBox = [f64; 4];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub score: f64,
    #[serde(rename = "class")]
    pub class_id: usize,
}

/// One detection as written to a JSON-lines file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image: String,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub score: f64,
    #[serde(rename = "class")]
    pub class_id: usize,
}

impl DetectionRecord {
    pub fn new(image: &str, d: &Detection) -> Self {
        DetectionRecord {
            image: image.to_string(),
            bbox: d.bbox,
            score: d.score,
            class_id: d.class_id,
        }
    }
}

pub fn area(b: &BBox) -> f64 {
    (b[2] - b[0]).max(0.0) * (b[3] - b[1]).max(0.0)
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = area(a) + area(b) - inter;
    if union <= 0.0 || inter <= 0.0 {
        0.0
    } else {
        (inter / union).min(1.0)
    }
}

/// Aspect-ratio consistency term `v` of CIoU.
pub fn ciou_aspect(p: &BBox, t: &BBox) -> f64 {
    let ratio = |b: &BBox| ((b[2] - b[0]) / (b[3] - b[1]).max(f64::MIN_POSITIVE)).atan();
    let d = ratio(t) - ratio(p);
    4.0 / (std::f64::consts::PI * std::f64::consts::PI) * d * d
}

/// Trade-off weight `α = v / (1 − IoU + v)`, zero when both vanish.
pub fn ciou_alpha(iou: f64, v: f64) -> f64 {
    let den = 1.0 - iou + v;
    if den > 0.0 {
        v / den
    } else {
        0.0
    }
}

/// `1 − IoU + ρ²/c² + αv`.
pub fn ciou_loss(p: &BBox, t: &BBox) -> f64 {
    let i = iou(p, t);
    let (pcx, pcy) = ((p[0] + p[2]) / 2.0, (p[1] + p[3]) / 2.0);
    let (tcx, tcy) = ((t[0] + t[2]) / 2.0, (t[1] + t[3]) / 2.0);
    let rho2 = (pcx - tcx).powi(2) + (pcy - tcy).powi(2);
    let cw = p[2].max(t[2]) - p[0].min(t[0]);
    let ch = p[3].max(t[3]) - p[1].min(t[1]);
    let c2 = cw * cw + ch * ch;
    let dist = if c2 > 0.0 { rho2 / c2 } else { 0.0 };
    let v = ciou_aspect(p, t);
    1.0 - i + dist + ciou_alpha(i, v) * v
}

pub fn clip(b: &BBox, width: f64, height: f64) -> BBox {
    [
        b[0].clamp(0.0, width),
        b[1].clamp(0.0, height),
        b[2].clamp(0.0, width),
        b[3].clamp(0.0, height),
    ]
}

/// Box from the four box logits of cell (`row`, `col`), not clipped.
pub fn decode_cell(t: [f64; 4], row: usize, col: usize, stride: usize) -> BBox {
    let s = stride as f64;
    let cx = (col as f64 + 2.0 * sigmoid_scalar(t[0]) - 0.5) * s;
    let cy = (row as f64 + 2.0 * sigmoid_scalar(t[1]) - 0.5) * s;
    let w = (2.0 * sigmoid_scalar(t[2])).powi(2) * s;
    let h = (2.0 * sigmoid_scalar(t[3])).powi(2) * s;
    [cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0]
}

fn logit(p: f64) -> Option<f64> {
    (p > 0.0 && p < 1.0).then(|| (p / (1.0 - p)).ln())
}

/// Inverse of [`decode_cell`]; `None` when the box is out of reach of the cell.
pub fn encode_cell(b: &BBox, row: usize, col: usize, stride: usize) -> Option<[f64; 4]> {
    let s = stride as f64;
    let cx = (b[0] + b[2]) / 2.0 / s;
    let cy = (b[1] + b[3]) / 2.0 / s;
    let w = (b[2] - b[0]) / s;
    let h = (b[3] - b[1]) / s;
    if w <= 0.0 || h <= 0.0 {
        return None;
    }
    Some([
        logit((cx - col as f64 + 0.5) / 2.0)?,
        logit((cy - row as f64 + 0.5) / 2.0)?,
        logit(w.sqrt() / 2.0)?,
        logit(h.sqrt() / 2.0)?,
    ])
}

/// Every cell of one level as a detection (pre-NMS), grouped per image.
///
/// Score is `σ(obj)·σ(cls)` for the best class; boxes are clipped to the image.
pub fn decode(raw: &Tensor, stride: usize, image_size: (usize, usize)) -> Result<Vec<Vec<Detection>>> {
    let (n, c, h, w) = raw.dims4()?;
    if c < BOX_CHANNELS + 2 {
        return Err(Error::shape(format!("prediction has {c} channels, need at least 6")));
    }
    let (ih, iw) = (image_size.0 as f64, image_size.1 as f64);
    let plane = h * w;
    let mut out = Vec::with_capacity(n);
    for b in 0..n {
        let base = b * c * plane;
        let at = |ch: usize, k: usize| raw.data()[base + ch * plane + k];
        let mut dets = Vec::with_capacity(plane);
        for i in 0..h {
            for j in 0..w {
                let k = i * w + j;
                let t = [at(0, k), at(1, k), at(2, k), at(3, k)];
                let obj = sigmoid_scalar(at(OBJ_CHANNEL, k));
                let (class_id, cls) = (OBJ_CHANNEL + 1..c)
                    .map(|ch| sigmoid_scalar(at(ch, k)))
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (q, s)| if s > best.1 { (q, s) } else { best });
                dets.push(Detection {
                    bbox: clip(&decode_cell(t, i, j, stride), iw, ih),
                    score: obj * cls,
                    class_id,
                });
            }
        }
        out.push(dets);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_by_hand() {
        assert!((iou(&[0.0, 0.0, 2.0, 2.0], &[1.0, 1.0, 3.0, 3.0]) - 1.0 / 7.0).abs() < 1e-15);
        assert_eq!(iou(&[0.0, 0.0, 1.0, 1.0], &[2.0, 2.0, 3.0, 3.0]), 0.0);
        assert_eq!(iou(&[1.0, 1.0, 4.0, 5.0], &[1.0, 1.0, 4.0, 5.0]), 1.0);
        assert_eq!(iou(&[1.0, 1.0, 1.0, 5.0], &[1.0, 1.0, 1.0, 5.0]), 0.0);
    }

    #[test]
    fn ciou_zero_for_identical_and_penalizes_offsets() {
        let a = [2.0, 3.0, 10.0, 7.0];
        assert_eq!(ciou_loss(&a, &a), 0.0);
        let b = [4.0, 3.0, 12.0, 7.0];
        assert!(ciou_loss(&a, &b) > 1.0 - iou(&a, &b));
    }

    #[test]
    fn zero_logits_give_unit_cell_box() {
        let raw = Tensor::zeros(&[1, 6, 2, 3]);
        let d = decode(&raw, 8, (64, 64)).unwrap();
        let cell = &d[0][1 * 3 + 2];
        assert_eq!(cell.bbox, [16.0, 8.0, 24.0, 16.0]);
        assert_eq!(cell.score, 0.25);
    }

    #[test]
    fn encode_inverts_decode() {
        let b = [10.0, 12.0, 19.0, 30.0];
        let t = encode_cell(&b, 2, 1, 8).unwrap();
        let d = decode_cell(t, 2, 1, 8);
        for k in 0..4 {
            assert!((d[k] - b[k]).abs() < 1e-9);
        }
        assert!(encode_cell(&b, 0, 5, 8).is_none());
    }
}
