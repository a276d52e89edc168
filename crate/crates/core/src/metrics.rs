//! Greedy detection matching, all-points average precision, and the
//! precision / recall / mAP50 / mAP50-95 summary.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::neckhead::{iou, Detection, GtBox};

/// IoU thresholds 0.50, 0.55, …, 0.95.
pub fn coco_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| 0.5 + 0.05 * i as f64)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MatchResult {
    /// Detection indices in descending score, earlier index first on ties.
    pub order: Vec<usize>,
    /// True positive flag per entry of `order`.
    pub tp: Vec<bool>,
    /// Matched ground-truth index per entry of `order`.
    pub matched: Vec<Option<usize>>,
}

pub fn score_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    order
}

/// One-to-one greedy matching: each detection, best first, takes the
/// unmatched same-class ground truth of highest IoU at or above `iou_thr`.
pub fn match_detections(dets: &[Detection], gts: &[GtBox], iou_thr: f64) -> MatchResult {
    let order = score_order(dets);
    let mut used = vec![false; gts.len()];
    let mut tp = Vec::with_capacity(order.len());
    let mut matched = Vec::with_capacity(order.len());
    for &d in &order {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if used[g] || gt.class_id != dets[d].class_id {
                continue;
            }
            let v = iou(&dets[d].bbox, &gt.bbox);
            if v >= iou_thr && best.is_none_or(|(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        if let Some((g, _)) = best {
            used[g] = true;
        }
        tp.push(best.is_some());
        matched.push(best.map(|(g, _)| g));
    }
    MatchResult { order, tp, matched }
}

/// All-points AP of a ranked TP/FP list: area under the monotone precision
/// envelope over recall.
pub fn average_precision(flags: &[bool], n_gt: usize) -> f64 {
    let scores: Vec<f64> = (0..flags.len()).map(|i| -(i as f64)).collect();
    average_precision_scored(&scores, flags, n_gt)
}

/// As [`average_precision`], with equal-score runs taken as one step so the
/// result does not depend on the order inside a run. `scores` must be sorted
/// in descending order.
///
/// Precision points are kept as integer ratios and the area is accumulated in
/// double-double, so the result is the correctly rounded AP (5/6 is exact).
pub fn average_precision_scored(scores: &[f64], flags: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    // (tp, rank) at the end of each equal-score run
    let mut points: Vec<(u64, u64)> = Vec::new();
    let mut tp = 0u64;
    for (i, &f) in flags.iter().enumerate() {
        tp += f as u64;
        if i + 1 == flags.len() || scores[i + 1] != scores[i] {
            points.push((tp, i as u64 + 1));
        }
    }
    let mut acc = (0.0f64, 0.0f64);
    let mut env = (0u64, 1u64);
    for k in (0..points.len()).rev() {
        let (t, r) = points[k];
        if u128::from(t) * u128::from(env.1) > u128::from(env.0) * u128::from(r) {
            env = (t, r);
        }
        let dtp = t - if k == 0 { 0 } else { points[k - 1].0 };
        if dtp > 0 {
            let num = (dtp * env.0) as f64;
            let den = (env.1 * n_gt as u64) as f64;
            let q = num / den;
            let lo = (-q).mul_add(den, num) / den;
            acc = dd_add(acc, q, lo);
        }
    }
    acc.0 + acc.1
}

fn dd_add((hi, lo): (f64, f64), b_hi: f64, b_lo: f64) -> (f64, f64) {
    let s = hi + b_hi;
    let v = s - hi;
    let e = (hi - (s - v)) + (b_hi - v) + lo + b_lo;
    let h = s + e;
    (h, e - (h - s))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub precision: f64,
    pub recall: f64,
    /// `(iou_threshold, mAP)` for each of the ten thresholds.
    pub ap_per_iou: Vec<(f64, f64)>,
    pub map50: f64,
    pub map50_95: f64,
}

/// Summary written by `eval`, mirroring the table columns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub precision: f64,
    pub recall: f64,
    pub map50: f64,
    pub map50_95: f64,
}

impl From<&EvalResult> for MetricsReport {
    fn from(r: &EvalResult) -> Self {
        MetricsReport {
            precision: r.precision,
            recall: r.recall,
            map50: r.map50,
            map50_95: r.map50_95,
        }
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Mean over classes with ground truth of the per-class AP at `iou_thr`.
pub fn mean_ap(dets: &[Vec<Detection>], gts: &[Vec<GtBox>], iou_thr: f64) -> f64 {
    let classes: BTreeSet<usize> = gts.iter().flatten().map(|g| g.class_id).collect();
    if classes.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for &c in &classes {
        let mut ranked: Vec<(f64, bool)> = Vec::new();
        let mut n_gt = 0;
        for (img_dets, img_gts) in dets.iter().zip(gts) {
            let d: Vec<Detection> = img_dets.iter().filter(|d| d.class_id == c).cloned().collect();
            let g: Vec<GtBox> = img_gts.iter().filter(|g| g.class_id == c).copied().collect();
            n_gt += g.len();
            let m = match_detections(&d, &g, iou_thr);
            ranked.extend(m.order.iter().zip(&m.tp).map(|(&i, &t)| (d[i].score, t)));
        }
        ranked.sort_by(|a, b| b.0.total_cmp(&a.0));
        let scores: Vec<f64> = ranked.iter().map(|r| r.0).collect();
        let flags: Vec<bool> = ranked.iter().map(|r| r.1).collect();
        total += average_precision_scored(&scores, &flags, n_gt);
    }
    total / classes.len() as f64
}

/// Precision and recall at IoU 0.5 over detections scoring at least `score_thr`,
/// and mAP over the ten IoU thresholds on all detections.
pub fn evaluate(dets: &[Vec<Detection>], gts: &[Vec<GtBox>], score_thr: f64) -> EvalResult {
    let (mut tp, mut n_det, mut n_gt) = (0, 0, 0);
    for (img_dets, img_gts) in dets.iter().zip(gts) {
        let kept: Vec<Detection> = img_dets.iter().filter(|d| d.score >= score_thr).cloned().collect();
        let m = match_detections(&kept, img_gts, 0.5);
        tp += m.tp.iter().filter(|&&t| t).count();
        n_det += kept.len();
        n_gt += img_gts.len();
    }
    let ap_per_iou: Vec<(f64, f64)> = coco_thresholds().iter().map(|&t| (t, mean_ap(dets, gts, t))).collect();
    EvalResult {
        precision: ratio(tp, n_det),
        recall: ratio(tp, n_gt),
        map50: ap_per_iou[0].1,
        map50_95: ap_per_iou.iter().map(|p| p.1).sum::<f64>() / ap_per_iou.len() as f64,
        ap_per_iou,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_case_is_five_sixths() {
        let ap = average_precision(&[true, false, true], 2);
        assert_eq!(ap, 5.0 / 6.0);
    }

    #[test]
    fn empty_and_perfect() {
        assert_eq!(average_precision(&[], 3), 0.0);
        assert_eq!(average_precision(&[true, true], 2), 1.0);
    }

    #[test]
    fn duplicate_detection_is_false_positive() {
        let g = [GtBox {
            bbox: [0.0, 0.0, 4.0, 4.0],
            class_id: 0,
        }];
        let d = |s| Detection {
            bbox: [0.0, 0.0, 4.0, 4.0],
            score: s,
            class_id: 0,
        };
        let m = match_detections(&[d(0.9), d(0.9)], &g, 0.5);
        assert_eq!(m.tp, vec![true, false]);
        assert_eq!(m.matched, vec![Some(0), None]);
    }

    #[test]
    fn empty_predictor_scores_zero() {
        let g = vec![vec![GtBox {
            bbox: [0.0, 0.0, 4.0, 4.0],
            class_id: 0,
        }]];
        let r = evaluate(&[vec![]], &g, 0.25);
        assert_eq!((r.precision, r.recall, r.map50, r.map50_95), (0.0, 0.0, 0.0, 0.0));
    }
}
