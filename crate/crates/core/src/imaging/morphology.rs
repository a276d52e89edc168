use std::collections::VecDeque;

use crate::imaging::{BinaryMask, CtSlice};

const N8: [(isize, isize); 8] = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)];
const N4: [(isize, isize); 4] = [(-1, 0), (0, -1), (0, 1), (1, 0)];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MorphOp {
    Erode,
    Dilate,
}

/// True where the pixel is at or below `t`.
pub fn binarize(image: &CtSlice, t: f64) -> BinaryMask {
    BinaryMask {
        h: image.h,
        w: image.w,
        bits: image.pixels.iter().map(|&v| v <= t).collect(),
    }
}

fn flood(mask: &BinaryMask, value: bool, seeds: &[usize], nbrs: &[(isize, isize)], seen: &mut [bool]) -> Vec<usize> {
    let (h, w) = (mask.h as isize, mask.w as isize);
    let mut out = Vec::new();
    let mut queue: VecDeque<usize> = VecDeque::new();
    for &s in seeds {
        if !seen[s] && mask.bits[s] == value {
            seen[s] = true;
            queue.push_back(s);
        }
    }
    while let Some(p) = queue.pop_front() {
        out.push(p);
        let (r, c) = ((p / mask.w) as isize, (p % mask.w) as isize);
        for &(dr, dc) in nbrs {
            let (rr, cc) = (r + dr, c + dc);
            if rr >= 0 && rr < h && cc >= 0 && cc < w {
                let q = rr as usize * mask.w + cc as usize;
                if !seen[q] && mask.bits[q] == value {
                    seen[q] = true;
                    queue.push_back(q);
                }
            }
        }
    }
    out
}

/// 8-connected components of true pixels, in raster order of their first pixel.
pub fn label_components(mask: &BinaryMask) -> Vec<Vec<usize>> {
    let mut seen = vec![false; mask.bits.len()];
    let mut comps = Vec::new();
    for p in 0..mask.bits.len() {
        if mask.bits[p] && !seen[p] {
            comps.push(flood(mask, true, &[p], &N8, &mut seen));
        }
    }
    comps
}

/// Removes 8-connected components smaller than `min_area_px`.
pub fn area_open(mask: &BinaryMask, min_area_px: usize) -> BinaryMask {
    let mut out = BinaryMask::empty(mask.h, mask.w);
    for comp in label_components(mask) {
        if comp.len() >= min_area_px {
            for p in comp {
                out.bits[p] = true;
            }
        }
    }
    out
}

fn border_pixels(h: usize, w: usize) -> Vec<usize> {
    let mut v = Vec::new();
    for c in 0..w {
        v.push(c);
        v.push((h - 1) * w + c);
    }
    for r in 0..h {
        v.push(r * w);
        v.push(r * w + w - 1);
    }
    v
}

/// Removes components touching any image edge.
pub fn clear_border_components(mask: &BinaryMask) -> BinaryMask {
    let mut seen = vec![false; mask.bits.len()];
    let mut out = mask.clone();
    for p in flood(mask, true, &border_pixels(mask.h, mask.w), &N8, &mut seen) {
        out.bits[p] = false;
    }
    out
}

/// Sets every false pixel not 4-connected to the border.
pub fn fill_holes(mask: &BinaryMask) -> BinaryMask {
    let mut seen = vec![false; mask.bits.len()];
    let outside = flood(mask, false, &border_pixels(mask.h, mask.w), &N4, &mut seen);
    let mut out = BinaryMask::full(mask.h, mask.w);
    for p in outside {
        out.bits[p] = false;
    }
    out
}

/// Offsets of a digital disk of the given radius.
pub fn disk(radius: usize) -> Vec<(isize, isize)> {
    let r = radius as isize;
    let mut v = Vec::new();
    for dr in -r..=r {
        for dc in -r..=r {
            if dr * dr + dc * dc <= r * r {
                v.push((dr, dc));
            }
        }
    }
    v
}

/// Binary erosion or dilation with a disk; pixels outside the image are ignored.
pub fn morph(mask: &BinaryMask, op: MorphOp, radius_px: usize) -> BinaryMask {
    let element = disk(radius_px);
    let (h, w) = (mask.h as isize, mask.w as isize);
    let mut out = BinaryMask::empty(mask.h, mask.w);
    for r in 0..h {
        for c in 0..w {
            let mut hits = element.iter().filter_map(|&(dr, dc)| {
                let (rr, cc) = (r + dr, c + dc);
                (rr >= 0 && rr < h && cc >= 0 && cc < w).then(|| mask.bits[(rr * w + cc) as usize])
            });
            out.bits[(r * w + c) as usize] = match op {
                MorphOp::Erode => hits.all(|b| b),
                MorphOp::Dilate => hits.any(|b| b),
            };
        }
    }
    out
}
