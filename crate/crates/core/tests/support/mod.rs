//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use std::collections::VecDeque;

use num_rational::BigRational;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use cployo::attention::{Cbam, SPATIAL_KERNEL};
use cployo::imaging::BinaryMask;
use cployo::kan::KanSpec;
use cployo::neckhead::{Detection, GtBox};
use cployo::nnkit::{Ctx, ParamStore, Tape};
use cployo::Tensor;

// ---------------------------------------------------------------- tensors

/// Direct seven-loop convolution with zero padding.
pub fn naive_conv2d(x: &Tensor, w: &Tensor, b: Option<&[f64]>, stride: usize, pad: usize, groups: usize) -> Tensor {
    let (n, c, h, wd) = x.dims4().unwrap();
    let (o, cg, kh, kw) = w.dims4().unwrap();
    assert_eq!(cg * groups, c);
    let og = o / groups;
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * o * oh * ow];
    for bi in 0..n {
        for oc in 0..o {
            let g = oc / og;
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = b.map_or(0.0, |b| b[oc]);
                    for ci in 0..cg {
                        let ic = g * cg + ci;
                        for u in 0..kh {
                            for v in 0..kw {
                                let r = (i * stride + u) as isize - pad as isize;
                                let s = (j * stride + v) as isize - pad as isize;
                                if r < 0 || s < 0 || r >= h as isize || s >= wd as isize {
                                    continue;
                                }
                                acc += x.at4(bi, ic, r as usize, s as usize) * w.at4(oc, ci, u, v);
                            }
                        }
                    }
                    out[((bi * o + oc) * oh + i) * ow + j] = acc;
                }
            }
        }
    }
    Tensor::new(&[n, o, oh, ow], out).unwrap()
}

/// Batch norm with biased batch variance.
pub fn naive_batchnorm_train(x: &Tensor, gamma: &[f64], beta: &[f64], eps: f64) -> Tensor {
    let (n, c, h, w) = x.dims4().unwrap();
    let mut out = x.clone();
    for ch in 0..c {
        let vals: Vec<f64> = (0..n)
            .flat_map(|b| (0..h).flat_map(move |i| (0..w).map(move |j| (b, i, j))))
            .map(|(b, i, j)| x.at4(b, ch, i, j))
            .collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let v = vals.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / vals.len() as f64;
        for b in 0..n {
            for i in 0..h {
                for j in 0..w {
                    let k = ((b * c + ch) * h + i) * w + j;
                    out.data_mut()[k] = gamma[ch] * (x.data()[k] - m) / (v + eps).sqrt() + beta[ch];
                }
            }
        }
    }
    out
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

// ---------------------------------------------------------------- splines

/// Cox–de Boor recursion for `B_{i,k}` on `knots`, half-open spans.
pub fn cox_de_boor(knots: &[f64], i: usize, k: usize, x: f64) -> f64 {
    if k == 0 {
        return if knots[i] <= x && x < knots[i + 1] { 1.0 } else { 0.0 };
    }
    let mut v = 0.0;
    let d1 = knots[i + k] - knots[i];
    if d1 > 0.0 {
        v += (x - knots[i]) / d1 * cox_de_boor(knots, i, k - 1, x);
    }
    let d2 = knots[i + k + 1] - knots[i + 1];
    if d2 > 0.0 {
        v += (knots[i + k + 1] - x) / d2 * cox_de_boor(knots, i + 1, k - 1, x);
    }
    v
}

/// Uniform extended knot vector over `[-bound, bound]` with `g` intervals.
pub fn uniform_knots(g: usize, k: usize, bound: f64) -> Vec<f64> {
    let h = 2.0 * bound / g as f64;
    (0..=g + 2 * k).map(|i| -bound + (i as f64 - k as f64) * h).collect()
}

// ---------------------------------------------------------------- Otsu

/// Exhaustive between-class variance search in exact rationals.
pub fn otsu_oracle(hist: &[u64; 256]) -> Option<u8> {
    let total: u64 = hist.iter().sum();
    let big = |v: u64| BigRational::from_integer(v.into());
    let n = big(total);
    let mut best: Option<(u8, BigRational)> = None;
    for t in 0..256usize {
        let n0: u64 = hist[..=t].iter().sum();
        let n1 = total - n0;
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let s0: u64 = hist[..=t].iter().enumerate().map(|(v, &c)| v as u64 * c).sum();
        let s1: u64 = hist[t + 1..].iter().enumerate().map(|(v, &c)| (v + t + 1) as u64 * c).sum();
        let w0 = big(n0) / &n;
        let w1 = big(n1) / &n;
        let mu0 = big(s0) / big(n0);
        let mu1 = big(s1) / big(n1);
        let d = mu0 - mu1;
        let score = w0 * w1 * &d * &d;
        if best.as_ref().is_none_or(|(_, b)| score > *b) {
            best = Some((t as u8, score));
        }
    }
    best.map(|b| b.0)
}

// ---------------------------------------------------------------- k-means

/// Globally optimal two-cluster split of 1-D values: the lower cluster as a
/// threshold `v ≤ t`, found by trying every split between distinct values.
pub fn best_two_means_split(values: &[f64]) -> f64 {
    let mut distinct: Vec<f64> = values.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let sse = |xs: &[f64]| {
        let m = xs.iter().sum::<f64>() / xs.len() as f64;
        xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>()
    };
    let mut best = (f64::INFINITY, distinct[0]);
    for &t in &distinct[..distinct.len() - 1] {
        let lo: Vec<f64> = values.iter().copied().filter(|&v| v <= t).collect();
        let hi: Vec<f64> = values.iter().copied().filter(|&v| v > t).collect();
        let cost = sse(&lo) + sse(&hi);
        if cost < best.0 {
            best = (cost, t);
        }
    }
    best.1
}

// ---------------------------------------------------------------- morphology

/// Area opening by breadth-first flood fill over 8-neighbours.
pub fn flood_area_open(mask: &BinaryMask, min_area: usize) -> BinaryMask {
    let (h, w) = (mask.h, mask.w);
    let mut seen = vec![false; h * w];
    let mut out = BinaryMask::empty(h, w);
    for start in 0..h * w {
        if seen[start] || !mask.bits[start] {
            continue;
        }
        let mut comp = Vec::new();
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        while let Some(p) = queue.pop_front() {
            comp.push(p);
            let (r, c) = ((p / w) as isize, (p % w) as isize);
            for dr in -1..=1 {
                for dc in -1..=1 {
                    let (rr, cc) = (r + dr, c + dc);
                    if rr < 0 || cc < 0 || rr >= h as isize || cc >= w as isize {
                        continue;
                    }
                    let q = rr as usize * w + cc as usize;
                    if mask.bits[q] && !seen[q] {
                        seen[q] = true;
                        queue.push_back(q);
                    }
                }
            }
        }
        if comp.len() >= min_area {
            for p in comp {
                out.bits[p] = true;
            }
        }
    }
    out
}

// ---------------------------------------------------------------- boxes

pub fn box_iou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let ix = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let iy = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = ix * iy;
    let ua = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    if inter <= 0.0 || ua <= 0.0 {
        0.0
    } else {
        inter / ua
    }
}

/// Quadratic greedy NMS: a box survives when no higher-ranked kept box of
/// its class overlaps it by more than `iou_thr`.
pub fn nms_reference(dets: &[Detection], iou_thr: f64, score_thr: f64) -> Vec<usize> {
    let rank = |a: usize, b: usize| dets[a].score > dets[b].score || (dets[a].score == dets[b].score && a < b);
    let mut cands: Vec<usize> = (0..dets.len()).filter(|&i| dets[i].score >= score_thr).collect();
    // selection sort keeps this independent of the library ordering
    for i in 0..cands.len() {
        let mut m = i;
        for j in i + 1..cands.len() {
            if rank(cands[j], cands[m]) {
                m = j;
            }
        }
        cands.swap(i, m);
    }
    let mut kept: Vec<usize> = Vec::new();
    for &c in &cands {
        if !kept
            .iter()
            .any(|&k| dets[k].class_id == dets[c].class_id && box_iou(&dets[k].bbox, &dets[c].bbox) > iou_thr)
        {
            kept.push(c);
        }
    }
    kept
}

/// All-points AP from the PR points at every cutoff of a strictly ranked list.
fn ap_from_ranked(flags: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut pts = Vec::new();
    let mut tp = 0;
    for (i, &f) in flags.iter().enumerate() {
        if f {
            tp += 1;
        }
        pts.push((tp as f64 / n_gt as f64, tp as f64 / (i + 1) as f64));
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for i in 0..pts.len() {
        let r = pts[i].0;
        if r > prev_r {
            let p_interp = pts.iter().filter(|q| q.0 >= r).map(|q| q.1).fold(0.0, f64::max);
            ap += (r - prev_r) * p_interp;
            prev_r = r;
        }
    }
    ap
}

/// Greedy matching of one image's detections of one class.
fn match_image(dets: &[&Detection], gts: &[&GtBox], thr: f64) -> Vec<bool> {
    let mut used = vec![false; gts.len()];
    dets.iter()
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in gts.iter().enumerate() {
                let v = box_iou(&d.bbox, &gt.bbox);
                if !used[g] && v >= thr && best.is_none_or(|(_, bv)| v > bv) {
                    best = Some((g, v));
                }
            }
            if let Some((g, _)) = best {
                used[g] = true;
            }
            best.is_some()
        })
        .collect()
}

pub struct BruteEval {
    pub precision: f64,
    pub recall: f64,
    pub map: [f64; 10],
}

fn sorted(mut ds: Vec<&Detection>) -> Vec<&Detection> {
    ds.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
    ds
}

/// Straightforward evaluator for corpora with distinct scores.
pub fn brute_evaluate(dets: &[Vec<Detection>], gts: &[Vec<GtBox>], score_thr: f64) -> BruteEval {
    let mut classes: Vec<usize> = gts.iter().flatten().map(|g| g.class_id).collect();
    classes.sort();
    classes.dedup();
    let mut map = [0.0; 10];
    for (ti, m) in map.iter_mut().enumerate() {
        let thr = 0.5 + 0.05 * ti as f64;
        if classes.is_empty() {
            continue;
        }
        let mut sum = 0.0;
        for &c in &classes {
            let mut ranked: Vec<(f64, bool)> = Vec::new();
            let mut n_gt = 0;
            for (di, gi) in dets.iter().zip(gts) {
                let d = sorted(di.iter().filter(|d| d.class_id == c).collect());
                let g: Vec<&GtBox> = gi.iter().filter(|g| g.class_id == c).collect();
                n_gt += g.len();
                let flags = match_image(&d, &g, thr);
                ranked.extend(d.iter().zip(flags).map(|(d, f)| (d.score, f)));
            }
            ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
            sum += ap_from_ranked(&ranked.iter().map(|r| r.1).collect::<Vec<_>>(), n_gt);
        }
        *m = sum / classes.len() as f64;
    }
    let (mut tp, mut nd, mut ng) = (0, 0, 0);
    for (di, gi) in dets.iter().zip(gts) {
        let kept = sorted(di.iter().filter(|d| d.score >= score_thr).collect());
        ng += gi.len();
        nd += kept.len();
        let mut cls: Vec<usize> = kept.iter().map(|d| d.class_id).collect();
        cls.sort();
        cls.dedup();
        for c in cls {
            let d: Vec<&Detection> = kept.iter().copied().filter(|d| d.class_id == c).collect();
            let g: Vec<&GtBox> = gi.iter().filter(|g| g.class_id == c).collect();
            tp += match_image(&d, &g, 0.5).into_iter().filter(|&f| f).count();
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    BruteEval {
        precision: ratio(tp, nd),
        recall: ratio(tp, ng),
        map,
    }
}

// ---------------------------------------------------------------- misc

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len().saturating_sub(1).max(1) as f64;
    (m, v.sqrt())
}

// ---------------------------------------------------------------- kan

pub fn edge_sum_oracle(x: &[f64], spec: &KanSpec, coeff: &Tensor, base: &Tensor, spline: &Tensor) -> Vec<f64> {
    let knots = uniform_knots(spec.grid_size, spec.degree, spec.bound);
    let nb = spec.grid_size + spec.degree;
    let (m, n) = (spec.out_dim, spec.in_dim);
    let mut y = vec![0.0; m];
    for q in 0..m {
        for p in 0..n {
            // right end belongs to the last span
            let u = x[p].clamp(-spec.bound, spec.bound).min(spec.bound - 1e-15 * spec.bound);
            let mut s = 0.0;
            for i in 0..nb {
                s += coeff.data()[(q * n + p) * nb + i] * cox_de_boor(&knots, i, spec.degree, u);
            }
            y[q] += base.data()[q * n + p] * silu(x[p]) + spline.data()[q * n + p] * s;
        }
    }
    y
}

// ---------------------------------------------------------------- attention

pub struct Gates {
    pub channel: Tensor,
    pub spatial: Tensor,
}

pub fn gates(cbam: &Cbam, store: &ParamStore, x: &Tensor) -> Gates {
    let tape = Tape::new();
    let cx = Ctx::new(&tape, store, false);
    let f = tape.constant(x.clone());
    let c = cbam.channel_attention(&cx, f).unwrap();
    let s = cbam.spatial_attention(&cx, f).unwrap();
    let channel = (*c.value()).clone();
    let spatial = (*s.value()).clone();
    Gates { channel, spatial }
}

/// `σ(W₂ relu(W₁ avg + b₁) + b₂ + W₂ relu(W₁ max + b₁) + b₂)` per sample.
pub fn channel_oracle(store: &ParamStore, x: &Tensor) -> Vec<Vec<f64>> {
    let (n, c, h, w) = x.dims4().unwrap();
    let w1 = store.get("a.mlp.fc1.weight").unwrap().data();
    let b1 = store.get("a.mlp.fc1.bias").unwrap().data();
    let w2 = store.get("a.mlp.fc2.weight").unwrap().data();
    let b2 = store.get("a.mlp.fc2.bias").unwrap().data();
    let hid = b1.len();
    let mlp = |v: &[f64]| -> Vec<f64> {
        let hidden: Vec<f64> = (0..hid)
            .map(|j| (b1[j] + (0..c).map(|i| w1[j * c + i] * v[i]).sum::<f64>()).max(0.0))
            .collect();
        (0..c).map(|i| b2[i] + (0..hid).map(|j| w2[i * hid + j] * hidden[j]).sum::<f64>()).collect()
    };
    (0..n)
        .map(|b| {
            let plane = |ch: usize| (0..h * w).map(move |k| x.at4(b, ch, k / w, k % w));
            let avg: Vec<f64> = (0..c).map(|ch| plane(ch).sum::<f64>() / (h * w) as f64).collect();
            let max: Vec<f64> = (0..c).map(|ch| plane(ch).fold(f64::NEG_INFINITY, f64::max)).collect();
            mlp(&avg).iter().zip(mlp(&max)).map(|(a, m)| sigmoid(a + m)).collect()
        })
        .collect()
}

/// `σ(f7×7([mean_c F; max_c F]))` with zero padding.
pub fn spatial_oracle(store: &ParamStore, x: &Tensor) -> Vec<f64> {
    let (n, c, h, w) = x.dims4().unwrap();
    let k = SPATIAL_KERNEL as isize;
    let r = k / 2;
    let wt = store.get("a.spatial.weight").unwrap().data();
    let bias = store.get("a.spatial.bias").unwrap().data()[0];
    let mut out = Vec::new();
    for b in 0..n {
        let mean = |i: usize, j: usize| (0..c).map(|ch| x.at4(b, ch, i, j)).sum::<f64>() / c as f64;
        let max = |i: usize, j: usize| (0..c).map(|ch| x.at4(b, ch, i, j)).fold(f64::NEG_INFINITY, f64::max);
        for i in 0..h as isize {
            for j in 0..w as isize {
                let mut acc = bias;
                for u in 0..k {
                    for v in 0..k {
                        let (p, q) = (i + u - r, j + v - r);
                        if p < 0 || q < 0 || p >= h as isize || q >= w as isize {
                            continue;
                        }
                        let (p, q) = (p as usize, q as usize);
                        acc += wt[(u * k + v) as usize] * mean(p, q) + wt[(k * k + u * k + v) as usize] * max(p, q);
                    }
                }
                out.push(sigmoid(acc));
            }
        }
    }
    out
}

/// Multiples of 1/8 keep every pooled sum exact, so reordering is exact too.
pub fn dyadic(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-24i32..=24) as f64 / 8.0).collect()).unwrap()
}

pub fn permute_pixels(x: &Tensor, perm: &[usize]) -> Tensor {
    let (n, c, h, w) = x.dims4().unwrap();
    let mut out = x.clone();
    for b in 0..n {
        for ch in 0..c {
            for (dst, &src) in perm.iter().enumerate() {
                out.data_mut()[((b * c + ch) * h * w) + dst] = x.data()[((b * c + ch) * h * w) + src];
            }
        }
    }
    out
}

pub fn permute_channels(x: &Tensor, perm: &[usize]) -> Tensor {
    let (n, c, h, w) = x.dims4().unwrap();
    let hw = h * w;
    let mut out = x.clone();
    for b in 0..n {
        for (dst, &src) in perm.iter().enumerate() {
            let (d, s) = ((b * c + dst) * hw, (b * c + src) * hw);
            out.data_mut()[d..d + hw].copy_from_slice(&x.data()[s..s + hw]);
        }
    }
    out
}

// ---------------------------------------------------------------- random inputs

pub fn random_histogram(rng: &mut ChaCha8Rng) -> [u64; 256] {
    let mut h = [0u64; 256];
    match rng.random_range(0..4) {
        // dense, moderate counts
        0 => h.iter_mut().for_each(|c| *c = rng.random_range(0..1000)),
        // a few occupied bins
        1 => {
            for _ in 0..rng.random_range(2..6) {
                h[rng.random_range(0..256)] += rng.random_range(1..50);
            }
        }
        // mixture of two Gaussians, like a CT slice
        2 => {
            let (m0, m1) = (rng.random_range(10.0..120.0), rng.random_range(130.0..245.0));
            for _ in 0..4096 {
                let m = if rng.random_bool(0.4) { m0 } else { m1 };
                let v: f64 = Normal::new(m, 12.0).unwrap().sample(rng);
                h[v.round().clamp(0.0, 255.0) as usize] += 1;
            }
        }
        // symmetric two-delta layouts, which tie across a whole range
        _ => {
            let a = rng.random_range(0..128);
            let b = rng.random_range(128..256);
            let n = rng.random_range(1..1_000_000);
            h[a] = n;
            h[b] = n;
        }
    }
    if h.iter().filter(|&&c| c > 0).count() < 2 {
        h[0] += 1;
        h[255] += 1;
    }
    h
}

pub fn random_box(rng: &mut ChaCha8Rng, around: Option<[f64; 4]>) -> [f64; 4] {
    match around {
        Some(b) => {
            let j = |rng: &mut ChaCha8Rng| rng.random_range(-4.0..4.0);
            let (x0, y0) = (b[0] + j(rng), b[1] + j(rng));
            let (x1, y1) = ((b[2] + j(rng)).max(x0 + 1.0), (b[3] + j(rng)).max(y0 + 1.0));
            [x0, y0, x1, y1]
        }
        None => {
            let (x, y) = (rng.random_range(0.0..100.0), rng.random_range(0.0..100.0));
            let (w, h) = (rng.random_range(2.0..30.0), rng.random_range(2.0..30.0));
            [x, y, x + w, y + h]
        }
    }
}

pub fn random_dets(rng: &mut ChaCha8Rng, n: usize, classes: usize, coarse_scores: bool) -> Vec<Detection> {
    let mut out: Vec<Detection> = Vec::new();
    for _ in 0..n {
        let around = (!out.is_empty() && rng.random_bool(0.6)).then(|| out[rng.random_range(0..out.len())].bbox);
        let score = if coarse_scores {
            rng.random_range(0..10) as f64 / 10.0
        } else {
            rng.random::<f64>()
        };
        out.push(Detection {
            bbox: random_box(rng, around),
            score,
            class_id: rng.random_range(0..classes),
        });
    }
    out
}

pub fn random_corpus(rng: &mut ChaCha8Rng, images: usize) -> (Vec<Vec<Detection>>, Vec<Vec<GtBox>>) {
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    for _ in 0..images {
        let g: Vec<GtBox> = (0..rng.random_range(0..5))
            .map(|_| GtBox {
                bbox: random_box(rng, None),
                class_id: rng.random_range(0..2),
            })
            .collect();
        let mut d = Vec::new();
        for gt in &g {
            for _ in 0..rng.random_range(0..3) {
                d.push(Detection {
                    bbox: random_box(rng, Some(gt.bbox)),
                    score: rng.random(),
                    class_id: if rng.random_bool(0.9) { gt.class_id } else { 1 - gt.class_id },
                });
            }
        }
        let extra = rng.random_range(0..4);
        d.extend(random_dets(rng, extra, 2, false));
        d.shuffle(rng);
        dets.push(d);
        gts.push(g);
    }
    (dets, gts)
}
