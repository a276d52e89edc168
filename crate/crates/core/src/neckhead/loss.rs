use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neckhead::assign::Targets;
use crate::neckhead::boxes::{ciou_alpha, ciou_aspect, decode_cell, iou, BBox};
use crate::neckhead::head::{BOX_CHANNELS, OBJ_CHANNEL};
use crate::nnkit::ops;
use crate::nnkit::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_box: f64,
    pub lambda_obj: f64,
    pub lambda_cls: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_box: 7.5,
            lambda_obj: 1.0,
            lambda_cls: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.lambda_box, self.lambda_obj, self.lambda_cls]
            .iter()
            .any(|v| !(v.is_finite() && *v >= 0.0))
        {
            return Err(Error::invalid(format!("loss weights must be non-negative: {self:?}")));
        }
        Ok(())
    }
}

/// Unweighted loss components and the weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub box_ciou: f64,
    pub obj_bce: f64,
    pub cls_bce: f64,
    pub positives: usize,
}

/// Quantities that enter the loss without gradient: CIoU `α` per positive
/// and the objectness target per level.
#[derive(Clone, Debug, PartialEq)]
pub struct Detached {
    pub alpha: Vec<Vec<f64>>,
    pub obj_target: Vec<Tensor>,
}

struct Positive {
    cell: usize,
    b: usize,
    i: usize,
    j: usize,
    gt: BBox,
    class_id: usize,
}

fn positives(targets: &Targets, level: usize) -> Vec<Positive> {
    let l = targets.levels[level];
    targets.cells[level]
        .iter()
        .enumerate()
        .filter_map(|(k, a)| {
            a.map(|a| Positive {
                cell: k,
                b: k / (l.h * l.w),
                i: k % (l.h * l.w) / l.w,
                j: k % l.w,
                gt: a.bbox,
                class_id: a.class_id,
            })
        })
        .collect()
}

fn flat(c: usize, h: usize, w: usize, p: &Positive, ch: usize) -> usize {
    ((p.b * c + ch) * h + p.i) * w + p.j
}

fn constant<'t>(tape: &'t Tape, v: Vec<f64>) -> Var<'t> {
    let n = v.len();
    tape.constant(Tensor::new(&[n], v).expect("1-d"))
}

/// Summed CIoU of predicted centre/size vectors against fixed targets.
fn ciou_sum<'t>(tape: &'t Tape, pred: [Var<'t>; 4], gt: &[BBox], alpha: &[f64]) -> Result<Var<'t>> {
    let [pcx, pcy, pw, ph] = pred;
    let col = |f: &dyn Fn(&BBox) -> f64| constant(tape, gt.iter().map(f).collect());
    let (gx1, gy1, gx2, gy2) = (col(&|b| b[0]), col(&|b| b[1]), col(&|b| b[2]), col(&|b| b[3]));
    let px1 = ops::sub(pcx, ops::scale(pw, 0.5))?;
    let px2 = ops::add(pcx, ops::scale(pw, 0.5))?;
    let py1 = ops::sub(pcy, ops::scale(ph, 0.5))?;
    let py2 = ops::add(pcy, ops::scale(ph, 0.5))?;
    let iw = ops::relu(ops::sub(ops::minimum(px2, gx2)?, ops::maximum(px1, gx1)?)?);
    let ih = ops::relu(ops::sub(ops::minimum(py2, gy2)?, ops::maximum(py1, gy1)?)?);
    let inter = ops::mul(iw, ih)?;
    let garea = col(&|b| (b[2] - b[0]) * (b[3] - b[1]));
    let union = ops::add(ops::sub(ops::mul(pw, ph)?, inter)?, garea)?;
    let iou_v = ops::div(inter, union)?;
    let dcx = ops::sub(pcx, col(&|b| (b[0] + b[2]) / 2.0))?;
    let dcy = ops::sub(pcy, col(&|b| (b[1] + b[3]) / 2.0))?;
    let rho2 = ops::add(ops::square(dcx), ops::square(dcy))?;
    let cw = ops::sub(ops::maximum(px2, gx2)?, ops::minimum(px1, gx1)?)?;
    let chh = ops::sub(ops::maximum(py2, gy2)?, ops::minimum(py1, gy1)?)?;
    let c2 = ops::add(ops::square(cw), ops::square(chh))?;
    let gatan = col(&|b| ((b[2] - b[0]) / (b[3] - b[1])).atan());
    let d = ops::sub(gatan, ops::atan(ops::div(pw, ph)?))?;
    let v = ops::scale(ops::square(d), 4.0 / (std::f64::consts::PI * std::f64::consts::PI));
    let av = ops::mul(v, constant(tape, alpha.to_vec()))?;
    let per = ops::add(ops::sub(ops::div(rho2, c2)?, iou_v)?, av)?;
    Ok(ops::affine(ops::sum(per), 1.0, gt.len() as f64))
}

/// Detached terms at the current prediction values.
pub fn detached_terms(raw: &[Tensor], targets: &Targets) -> Result<Detached> {
    let mut alpha = Vec::new();
    let mut obj_target = Vec::new();
    for (li, r) in raw.iter().enumerate() {
        let (n, c, h, w) = r.dims4()?;
        let stride = targets.levels[li].stride;
        let mut tgt = Tensor::zeros(&[n, 1, h, w]);
        let mut al = Vec::new();
        for p in positives(targets, li) {
            let t = [0, 1, 2, 3].map(|ch| r.data()[flat(c, h, w, &p, ch)]);
            let pb = decode_cell(t, p.i, p.j, stride);
            let i = iou(&pb, &p.gt);
            tgt.data_mut()[p.cell] = i;
            al.push(ciou_alpha(i, ciou_aspect(&pb, &p.gt)));
        }
        alpha.push(al);
        obj_target.push(tgt);
    }
    Ok(Detached { alpha, obj_target })
}

/// Detection loss. Objectness targets positives with the detached IoU of
/// their current prediction.
pub fn detection_loss<'t>(raw: &[Var<'t>], targets: &Targets, w: &LossWeights) -> Result<(Var<'t>, LossParts)> {
    let values: Vec<Tensor> = raw.iter().map(|r| (*r.value()).clone()).collect();
    let det = detached_terms(&values, targets)?;
    detection_loss_with(raw, targets, w, &det)
}

/// Detection loss with the detached terms supplied by the caller.
pub fn detection_loss_with<'t>(
    raw: &[Var<'t>],
    targets: &Targets,
    w: &LossWeights,
    det: &Detached,
) -> Result<(Var<'t>, LossParts)> {
    w.validate()?;
    if raw.len() != targets.levels.len() {
        return Err(Error::shape(format!(
            "{} prediction levels for {} target levels",
            raw.len(),
            targets.levels.len()
        )));
    }
    let tape = raw[0].tape();
    let mut box_sum: Option<Var<'t>> = None;
    let mut obj_sum: Option<Var<'t>> = None;
    let mut cls_sum: Option<Var<'t>> = None;
    let mut n_pos = 0usize;
    let mut n_cells = 0usize;
    let mut n_cls = 0usize;
    let acc = |slot: &mut Option<Var<'t>>, v: Var<'t>| -> Result<()> {
        *slot = Some(match *slot {
            Some(s) => ops::add(s, v)?,
            None => v,
        });
        Ok(())
    };
    for (li, &r) in raw.iter().enumerate() {
        let (n, c, h, wd) = r.value().dims4()?;
        let l = targets.levels[li];
        if (n, h, wd) != (targets.batch, l.h, l.w) || c < BOX_CHANNELS + 2 {
            return Err(Error::shape(format!(
                "level {li}: prediction {:?} against targets {}×{}×{}",
                r.shape(),
                targets.batch,
                l.h,
                l.w
            )));
        }
        let k = c - OBJ_CHANNEL - 1;
        let obj = ops::slice_channels(r, OBJ_CHANNEL, 1)?;
        let ones = Tensor::ones(&[n, 1, h, wd]);
        acc(&mut obj_sum, ops::bce_with_logits_sum(obj, &det.obj_target[li], &ones)?)?;
        n_cells += n * h * wd;

        let pos = positives(targets, li);
        if pos.is_empty() {
            continue;
        }
        let flat_r = ops::reshape(r, &[n * c * h * wd])?;
        let pick = |ch: usize| -> Result<Var<'t>> {
            let idx: Vec<usize> = pos.iter().map(|p| flat(c, h, wd, p, ch)).collect();
            ops::gather(flat_r, &idx)
        };
        let s = l.stride as f64;
        let offs = |f: &dyn Fn(&Positive) -> usize| constant(tape, pos.iter().map(|p| (f(p) as f64 - 0.5) * s).collect());
        let pcx = ops::add(ops::scale(ops::sigmoid(pick(0)?), 2.0 * s), offs(&|p| p.j))?;
        let pcy = ops::add(ops::scale(ops::sigmoid(pick(1)?), 2.0 * s), offs(&|p| p.i))?;
        let pw = ops::scale(ops::square(ops::sigmoid(pick(2)?)), 4.0 * s);
        let ph = ops::scale(ops::square(ops::sigmoid(pick(3)?)), 4.0 * s);
        let gts: Vec<BBox> = pos.iter().map(|p| p.gt).collect();
        acc(&mut box_sum, ciou_sum(tape, [pcx, pcy, pw, ph], &gts, &det.alpha[li])?)?;

        let idx: Vec<usize> = pos
            .iter()
            .flat_map(|p| (0..k).map(move |q| flat(c, h, wd, p, OBJ_CHANNEL + 1 + q)))
            .collect();
        let logits = ops::gather(flat_r, &idx)?;
        let onehot: Vec<f64> = pos
            .iter()
            .flat_map(|p| (0..k).map(move |q| if q == p.class_id { 1.0 } else { 0.0 }))
            .collect();
        let target = Tensor::new(&[idx.len()], onehot)?;
        acc(&mut cls_sum, ops::bce_with_logits_sum(logits, &target, &Tensor::ones(&[idx.len()]))?)?;
        n_pos += pos.len();
        n_cls += idx.len();
    }
    let obj = ops::scale(obj_sum.expect("at least one level"), 1.0 / n_cells as f64);
    let mut parts = LossParts {
        obj_bce: obj.value().data()[0],
        positives: n_pos,
        ..LossParts::default()
    };
    let mut total = ops::scale(obj, w.lambda_obj);
    if let (Some(b), Some(cl)) = (box_sum, cls_sum) {
        let b = ops::scale(b, 1.0 / n_pos as f64);
        let cl = ops::scale(cl, 1.0 / n_cls as f64);
        parts.box_ciou = b.value().data()[0];
        parts.cls_bce = cl.value().data()[0];
        total = ops::add(total, ops::scale(b, w.lambda_box))?;
        total = ops::add(total, ops::scale(cl, w.lambda_cls))?;
    }
    parts.total = total.value().data()[0];
    if !parts.total.is_finite() {
        return Err(Error::NonFinite(format!("detection loss {parts:?}")));
    }
    Ok((total, parts))
}
