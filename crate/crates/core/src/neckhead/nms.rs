use serde::{Deserialize, Serialize};

use crate::neckhead::boxes::{iou, Detection};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NmsConfig {
    pub iou_thr: f64,
    pub score_thr: f64,
    pub max_out: usize,
}

impl Default for NmsConfig {
    fn default() -> Self {
        NmsConfig {
            iou_thr: 0.45,
            score_thr: 0.25,
            max_out: 300,
        }
    }
}

/// Indices of kept detections in output order.
pub fn nms_indices(dets: &[Detection], cfg: &NmsConfig) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).filter(|&i| dets[i].score >= cfg.score_thr).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept.len() >= cfg.max_out {
            break;
        }
        let d = &dets[i];
        let suppressed = kept
            .iter()
            .any(|&k| dets[k].class_id == d.class_id && iou(&dets[k].bbox, &d.bbox) > cfg.iou_thr);
        if !suppressed {
            kept.push(i);
        }
    }
    kept
}

/// Greedy per-class suppression in descending score, earlier index first on ties.
pub fn nms(dets: &[Detection], cfg: &NmsConfig) -> Vec<Detection> {
    nms_indices(dets, cfg).into_iter().map(|i| dets[i].clone()).collect()
}
