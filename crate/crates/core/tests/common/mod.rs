//! Shared brute-force oracles and random-instance helpers used by the
//! oracle and acceptance suites. Each oracle re-implements the stated
//! rule naively and stays independent of the code paths it checks.

#![allow(dead_code)]

use std::collections::BTreeMap;

use stuffnet_core::boxgeom::{
    encode, iou, BBox, BoxDelta, GtBox, HeadSampleConfig, RpnLabel, RpnSampleConfig,
};
use stuffnet_core::evalkit::ImageEval;
use stuffnet_core::graph::Graph;
use stuffnet_core::layers::{self, ConvParams, PoolParams};
use stuffnet_core::rng::Rng;
use stuffnet_core::tensor::Tensor;

pub fn rand_tensor(dims: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::rand_uniform(dims, -1.0, 1.0, rng).unwrap()
}

/// Distinct values (pairwise gap >= 0.004) in random order, so maxima
/// are unique.
pub fn distinct_tensor(dims: &[usize], rng: &mut Rng) -> Tensor {
    let n: usize = dims.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.004 - 0.002 * n as f64).collect();
    rng.shuffle(&mut vals);
    Tensor::new(dims, vals).unwrap()
}

pub fn run_conv(x: &Tensor, w: &Tensor, b: &Tensor, p: ConvParams) -> Tensor {
    let mut g = Graph::new();
    let xn = g.leaf(x.clone());
    let wn = g.leaf(w.clone());
    let bn = g.leaf(b.clone());
    let c = layers::conv2d(&mut g, xn, wn, bn, p).unwrap();
    g.value(c).clone()
}

/// Direct 7-loop convolution evaluation.
pub fn conv_oracle(x: &Tensor, w: &Tensor, b: &Tensor, p: &ConvParams) -> Tensor {
    let (xd, wd) = (x.dims(), w.dims());
    let (n, ci, h, iw) = (xd[0], xd[1], xd[2], xd[3]);
    let (co, kh, kw) = (wd[0], wd[2], wd[3]);
    let oh = p.out_extent(h, kh).unwrap();
    let ow = p.out_extent(iw, kw).unwrap();
    let mut out = Tensor::zeros(&[n, co, oh, ow]).unwrap();
    for ni in 0..n {
        for o in 0..co {
            for y in 0..oh {
                for xq in 0..ow {
                    let mut acc = b.data()[o];
                    for c in 0..ci {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (y * p.stride + ky * p.dilation) as isize - p.pad as isize;
                                let ix =
                                    (xq * p.stride + kx * p.dilation) as isize - p.pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= iw as isize {
                                    continue;
                                }
                                acc += x.at4(ni, c, iy as usize, ix as usize)
                                    * w.at4(o, c, ky, kx);
                            }
                        }
                    }
                    let idx = out.idx4(ni, o, y, xq);
                    out.data_mut()[idx] = acc;
                }
            }
        }
    }
    out
}

/// Spread the taps of a kernel with zeros so that plain convolution
/// reproduces the dilated one.
pub fn zero_stuffed_kernel(w: &Tensor, dilation: usize) -> Tensor {
    let d = w.dims();
    let (co, ci, kh, kw) = (d[0], d[1], d[2], d[3]);
    let eh = kh + (kh - 1) * (dilation - 1);
    let ew = kw + (kw - 1) * (dilation - 1);
    let mut out = Tensor::zeros(&[co, ci, eh, ew]).unwrap();
    for o in 0..co {
        for c in 0..ci {
            for ky in 0..kh {
                for kx in 0..kw {
                    let idx = out.idx4(o, c, ky * dilation, kx * dilation);
                    out.data_mut()[idx] = w.at4(o, c, ky, kx);
                }
            }
        }
    }
    out
}

pub fn maxpool_oracle(x: &Tensor, p: &PoolParams) -> Tensor {
    let d = x.dims();
    let (n, c, h, w) = (d[0], d[1], d[2], d[3]);
    let oh = p.out_extent(h).unwrap();
    let ow = p.out_extent(w).unwrap();
    let mut out = Tensor::zeros(&[n, c, oh, ow]).unwrap();
    for ni in 0..n {
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    for ky in 0..p.window {
                        for kx in 0..p.window {
                            let iy = (oy * p.stride + ky) as isize - p.pad as isize;
                            let ix = (ox * p.stride + kx) as isize - p.pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            best = best.max(x.at4(ni, ch, iy as usize, ix as usize));
                        }
                    }
                    let idx = out.idx4(ni, ch, oy, ox);
                    out.data_mut()[idx] = best;
                }
            }
        }
    }
    out
}

/// Same rounding rule, nested loops, no shared code.
pub fn roi_pool_oracle(feat: &Tensor, roi: [f64; 4], grid: usize) -> Tensor {
    let d = feat.dims();
    let (c, h, w) = (d[1], d[2], d[3]);
    let x0 = roi[0].clamp(0.0, w as f64);
    let y0 = roi[1].clamp(0.0, h as f64);
    let x1 = roi[2].clamp(0.0, w as f64);
    let y1 = roi[3].clamp(0.0, h as f64);
    let mut out = Tensor::zeros(&[c, grid, grid]).unwrap();
    for ch in 0..c {
        for gy in 0..grid {
            for gx in 0..grid {
                let ys = (y0 + (y1 - y0) * gy as f64 / grid as f64).floor() as isize;
                let ye = (y0 + (y1 - y0) * (gy + 1) as f64 / grid as f64).ceil() as isize;
                let xs = (x0 + (x1 - x0) * gx as f64 / grid as f64).floor() as isize;
                let xe = (x0 + (x1 - x0) * (gx + 1) as f64 / grid as f64).ceil() as isize;
                let ys = ys.clamp(0, h as isize - 1) as usize;
                let ye = (ye.clamp(1, h as isize) as usize).max(ys + 1);
                let xs = xs.clamp(0, w as isize - 1) as usize;
                let xe = (xe.clamp(1, w as isize) as usize).max(xs + 1);
                let mut best = f64::NEG_INFINITY;
                for y in ys..ye {
                    for x in xs..xe {
                        best = best.max(feat.at4(0, ch, y, x));
                    }
                }
                let idx = (ch * grid + gy) * grid + gx;
                out.data_mut()[idx] = best;
            }
        }
    }
    out
}

pub fn nms_oracle(boxes: &[BBox], scores: &[f64], thresh: f64, max_keep: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    'outer: for &i in &order {
        if kept.len() >= max_keep {
            break;
        }
        for &j in &kept {
            if iou(&boxes[i], &boxes[j]).unwrap() > thresh {
                continue 'outer;
            }
        }
        kept.push(i);
    }
    kept
}

pub fn random_boxes(n: usize, extent: f64, rng: &mut Rng) -> (Vec<BBox>, Vec<f64>) {
    let mut boxes = Vec::with_capacity(n);
    let mut scores = Vec::with_capacity(n);
    for _ in 0..n {
        let x0 = rng.uniform(0.0, extent - 2.0);
        let y0 = rng.uniform(0.0, extent - 2.0);
        let w = rng.uniform(1.0, extent / 2.0);
        let h = rng.uniform(1.0, extent / 2.0);
        boxes.push(BBox::new(x0, y0, x0 + w, y0 + h));
        scores.push(rng.unit());
    }
    (boxes, scores)
}

/// Brute-force application of the RPN assignment rules. Uses the same
/// subsample draw (seeded identically) but recomputes everything else
/// from scratch.
pub fn rpn_oracle(
    anchors: &[BBox],
    gts: &[BBox],
    w: f64,
    h: f64,
    cfg: &RpnSampleConfig,
    seed: u64,
) -> Vec<RpnLabel> {
    let inb: Vec<bool> = anchors
        .iter()
        .map(|a| a.x0 >= 0.0 && a.y0 >= 0.0 && a.x1 <= w && a.y1 <= h)
        .collect();
    let n = anchors.len();
    let mut pos = vec![false; n];
    let mut neg = vec![false; n];
    let mut best_gt = vec![usize::MAX; n];
    for i in 0..n {
        if !inb[i] {
            continue;
        }
        let mut best = 0.0;
        for (j, g) in gts.iter().enumerate() {
            let v = iou(&anchors[i], g).unwrap();
            if v > best {
                best = v;
                best_gt[i] = j;
            }
        }
        if best > cfg.hi_thresh {
            pos[i] = true;
        } else if best < cfg.lo_thresh {
            neg[i] = true;
        }
    }
    for (j, g) in gts.iter().enumerate() {
        let mut top = 0.0f64;
        for (i, a) in anchors.iter().enumerate() {
            if inb[i] {
                top = top.max(iou(a, g).unwrap());
            }
        }
        if top <= 0.0 {
            continue;
        }
        for (i, a) in anchors.iter().enumerate() {
            if inb[i] && iou(a, g).unwrap() == top {
                pos[i] = true;
                neg[i] = false;
                if best_gt[i] == usize::MAX {
                    best_gt[i] = j;
                }
            }
        }
    }
    // identical subsampling procedure (shared deterministic rng)
    let mut rng = Rng::stream_indexed(seed, "oracle", 0);
    let max_pos = (cfg.batch as f64 * cfg.pos_fraction) as usize;
    let on: Vec<usize> = (0..n).filter(|&i| pos[i]).collect();
    if on.len() > max_pos {
        let mut order = on;
        rng.shuffle(&mut order);
        for &i in &order[max_pos..] {
            pos[i] = false;
        }
    }
    let kept_pos = pos.iter().filter(|&&p| p).count();
    let want_neg = cfg.batch.saturating_sub(kept_pos);
    let on: Vec<usize> = (0..n).filter(|&i| neg[i]).collect();
    if on.len() > want_neg {
        let mut order = on;
        rng.shuffle(&mut order);
        for &i in &order[want_neg..] {
            neg[i] = false;
        }
    }
    (0..n)
        .map(|i| {
            if pos[i] {
                RpnLabel::Positive(encode(&anchors[i], &gts[best_gt[i]]).unwrap())
            } else if neg[i] {
                RpnLabel::Negative
            } else {
                RpnLabel::Ignore
            }
        })
        .collect()
}

/// Brute-force head sampling oracle (same shared rng for subsampling).
pub fn head_oracle(
    proposals: &[BBox],
    gts: &[GtBox],
    cfg: &HeadSampleConfig,
    seed: u64,
) -> Vec<(BBox, usize, Option<BoxDelta>)> {
    let mut fg: Vec<(usize, usize)> = Vec::new();
    let mut bg: Vec<usize> = Vec::new();
    for (i, p) in proposals.iter().enumerate() {
        let mut best = 0.0;
        let mut best_gt = usize::MAX;
        for (j, g) in gts.iter().enumerate() {
            let v = iou(p, &g.rect).unwrap();
            if v > best {
                best = v;
                best_gt = j;
            }
        }
        if best >= cfg.fg_thresh {
            fg.push((i, best_gt));
        } else if best >= cfg.bg_lo && best < cfg.bg_hi {
            bg.push(i);
        }
    }
    let mut rng = Rng::stream_indexed(seed, "oracle-head", 0);
    let max_fg = (cfg.batch as f64 * cfg.fg_fraction) as usize;
    if fg.len() > max_fg {
        rng.shuffle(&mut fg);
        fg.truncate(max_fg);
    }
    let want_bg = cfg.batch - fg.len();
    if bg.len() > want_bg {
        rng.shuffle(&mut bg);
        bg.truncate(want_bg);
    }
    let mut out = Vec::new();
    for (i, j) in fg {
        out.push((
            proposals[i],
            gts[j].class,
            Some(encode(&proposals[i], &gts[j].rect).unwrap()),
        ));
    }
    for i in bg {
        out.push((proposals[i], 0, None));
    }
    out
}

/// Second, naive evaluator: per-class, sort-all-then-match, trapezoid-free
/// interpolated AP computed from first principles.
pub fn map_oracle(images: &[ImageEval], num_classes: usize, iou_t: f64) -> f64 {
    let mut aps = Vec::new();
    for class in 1..=num_classes {
        let mut n_gt = 0usize;
        // (score, img, det index)
        let mut dets: Vec<(f64, usize, usize)> = Vec::new();
        for (ii, img) in images.iter().enumerate() {
            n_gt += img
                .gts
                .iter()
                .filter(|g| g.class == class && !g.ignore)
                .count();
            let mut of_class: Vec<(usize, f64)> = img
                .dets
                .iter()
                .enumerate()
                .filter(|(_, d)| d.class == class)
                .map(|(i, d)| (i, d.score))
                .collect();
            // within-image rank order (descending score, stable)
            of_class.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            for (rank, (i, s)) in of_class.into_iter().enumerate() {
                let _ = i;
                dets.push((s, ii, rank));
            }
        }
        if n_gt == 0 {
            continue;
        }
        dets.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        // replay matching per image in global score order
        let mut matched: BTreeMap<(usize, usize), bool> = BTreeMap::new();
        let mut tps: Vec<bool> = Vec::new();
        for &(score, ii, rank) in &dets {
            let img = &images[ii];
            // find the rank-th best det of this class in this image
            let mut of_class: Vec<(usize, f64)> = img
                .dets
                .iter()
                .enumerate()
                .filter(|(_, d)| d.class == class)
                .map(|(i, d)| (i, d.score))
                .collect();
            of_class.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            let det = &img.dets[of_class[rank].0];
            let _ = score;
            let mut best = 0.0f64;
            let mut best_j = usize::MAX;
            let mut best_ign = 0.0f64;
            for (j, g) in img.gts.iter().enumerate() {
                if g.class != class {
                    continue;
                }
                let v = iou(&det.rect, &g.rect).unwrap();
                if g.ignore {
                    best_ign = best_ign.max(v);
                } else if !matched.get(&(ii, j)).copied().unwrap_or(false) && v > best {
                    best = v;
                    best_j = j;
                }
            }
            if best >= iou_t && best_j != usize::MAX {
                matched.insert((ii, best_j), true);
                tps.push(true);
            } else if best_ign >= iou_t {
                continue; // ignored: not counted at all
            } else {
                tps.push(false);
            }
        }
        // all-points interpolated AP from scratch
        let mut tp = 0.0;
        let mut fp = 0.0;
        let mut pr: Vec<(f64, f64)> = Vec::new();
        for &is_tp in &tps {
            if is_tp {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            pr.push((tp / n_gt as f64, tp / (tp + fp)));
        }
        let mut ap = 0.0;
        let mut last_r = 0.0;
        for i in 0..pr.len() {
            let r = pr[i].0;
            if r <= last_r {
                continue;
            }
            let p_max = pr[i..]
                .iter()
                .map(|&(_, p)| p)
                .fold(f64::NEG_INFINITY, f64::max);
            ap += (r - last_r) * p_max;
            last_r = r;
        }
        aps.push(ap);
    }
    if aps.is_empty() {
        0.0
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    }
}

