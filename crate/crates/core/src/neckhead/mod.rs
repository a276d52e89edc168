//! Fusion neck, detection head, box decoding, target assignment, loss and NMS.

pub mod assign;
pub mod boxes;
pub mod head;
pub mod loss;
pub mod neck;
pub mod nms;

pub use assign::{assign_targets, level_for, Assigned, GtBox, LevelShape, Targets};
pub use boxes::{ciou_loss, clip, decode, decode_cell, encode_cell, iou, BBox, Detection, DetectionRecord};
pub use head::{Head, HeadConfig, STRIDES};
pub use loss::{detached_terms, detection_loss, detection_loss_with, Detached, LossParts, LossWeights};
pub use neck::{FusionBlock, Mixer, Neck, NeckConfig};
pub use nms::{nms, nms_indices, NmsConfig};

use crate::error::Result;
use crate::tensor::Tensor;

/// Decodes every level, then applies NMS per image.
pub fn postprocess(raw: &[Tensor], image_size: (usize, usize), cfg: &NmsConfig) -> Result<Vec<Vec<Detection>>> {
    let mut all: Vec<Vec<Detection>> = Vec::new();
    for (r, &s) in raw.iter().zip(STRIDES.iter()) {
        for (b, dets) in decode(r, s, image_size)?.into_iter().enumerate() {
            if all.len() <= b {
                all.resize(b + 1, Vec::new());
            }
            all[b].extend(dets);
        }
    }
    Ok(all.iter().map(|d| nms(d, cfg)).collect())
}
