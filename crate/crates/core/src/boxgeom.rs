//! Box arithmetic and proposal machinery: IoU, anchor generation,
//! box-regression encode/decode, NMS, RPN label assignment, and
//! detection-head minibatch sampling.
//!
//! Boxes are continuous and half-open: width = x1 - x0 with no +1
//! correction. This convention is fixed project-wide.

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Axis-aligned rectangle in pixel (or feature-map) coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> BBox {
        BBox { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn is_valid(&self) -> bool {
        self.x1 > self.x0 && self.y1 > self.y0
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x0 + self.x1) * 0.5, (self.y0 + self.y1) * 0.5)
    }

    pub fn clamped(&self, w: f64, h: f64) -> BBox {
        BBox {
            x0: self.x0.clamp(0.0, w),
            y0: self.y0.clamp(0.0, h),
            x1: self.x1.clamp(0.0, w),
            y1: self.y1.clamp(0.0, h),
        }
    }

    /// Entirely inside [0,w] x [0,h]?
    pub fn inside(&self, w: f64, h: f64) -> bool {
        self.x0 >= 0.0 && self.y0 >= 0.0 && self.x1 <= w && self.y1 <= h
    }

    pub fn scaled(&self, factor: f64) -> BBox {
        BBox {
            x0: self.x0 * factor,
            y0: self.y0 * factor,
            x1: self.x1 * factor,
            y1: self.y1 * factor,
        }
    }
}

/// Ground-truth box with class id and evaluation ignore flag.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GtBox {
    pub rect: BBox,
    pub class: usize,
    pub ignore: bool,
}

impl GtBox {
    pub fn new(rect: BBox, class: usize) -> GtBox {
        GtBox {
            rect,
            class,
            ignore: false,
        }
    }
}

/// Scored detection.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub rect: BBox,
    pub class: usize,
    pub score: f64,
}

/// Intersection over union. Errors on degenerate (non-positive area) boxes.
pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    if !a.is_valid() || !b.is_valid() {
        return Err(Error::invalid(format!("iou of degenerate box {a:?} / {b:?}")));
    }
    Ok(iou_raw(a, b))
}

#[inline]
pub(crate) fn iou_raw(a: &BBox, b: &BBox) -> f64 {
    let ix = (a.x1.min(b.x1) - a.x0.max(b.x0)).max(0.0);
    let iy = (a.y1.min(b.y1) - a.y0.max(b.y0)).max(0.0);
    let inter = ix * iy;
    if inter <= 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

/// Anchor layout: one set of scale x ratio boxes centered on every cell
/// of a feature map with the given pixel stride.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorGrid {
    pub stride: usize,
    pub scales: Vec<f64>,
    pub ratios: Vec<f64>,
}

impl AnchorGrid {
    pub fn new(stride: usize, scales: Vec<f64>, ratios: Vec<f64>) -> Result<AnchorGrid> {
        if stride == 0 || scales.is_empty() || ratios.is_empty() {
            return Err(Error::invalid("anchor grid needs a stride, scales and ratios"));
        }
        Ok(AnchorGrid {
            stride,
            scales,
            ratios,
        })
    }

    /// Anchors per cell.
    pub fn k(&self) -> usize {
        self.scales.len() * self.ratios.len()
    }
}

/// All anchors for a feature map, row-major over cells, scales-major
/// over ratios within a cell. A ratio r = h/w at scale s gives
/// w = s/sqrt(r), h = s*sqrt(r), preserving area s^2.
pub fn generate_anchors(grid: &AnchorGrid, feat_h: usize, feat_w: usize) -> Vec<BBox> {
    let mut shapes = Vec::with_capacity(grid.k());
    for &s in &grid.scales {
        for &r in &grid.ratios {
            let w = s / r.sqrt();
            let h = s * r.sqrt();
            shapes.push((w, h));
        }
    }
    let stride = grid.stride as f64;
    let mut out = Vec::with_capacity(feat_h * feat_w * grid.k());
    for y in 0..feat_h {
        for x in 0..feat_w {
            let cx = (x as f64 + 0.5) * stride;
            let cy = (y as f64 + 0.5) * stride;
            for &(w, h) in &shapes {
                out.push(BBox::new(
                    cx - w * 0.5,
                    cy - h * 0.5,
                    cx + w * 0.5,
                    cy + h * 0.5,
                ));
            }
        }
    }
    out
}

/// Dimensionless box-regression offsets in the center/log-size
/// parameterization.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct BoxDelta {
    pub tx: f64,
    pub ty: f64,
    pub tw: f64,
    pub th: f64,
}

pub fn encode(anchor: &BBox, gt: &BBox) -> Result<BoxDelta> {
    if !anchor.is_valid() || !gt.is_valid() {
        return Err(Error::invalid("encode on box with non-positive extent"));
    }
    let (acx, acy) = anchor.center();
    let (gcx, gcy) = gt.center();
    Ok(BoxDelta {
        tx: (gcx - acx) / anchor.width(),
        ty: (gcy - acy) / anchor.height(),
        tw: (gt.width() / anchor.width()).ln(),
        th: (gt.height() / anchor.height()).ln(),
    })
}

pub fn decode(anchor: &BBox, t: &BoxDelta) -> Result<BBox> {
    if !anchor.is_valid() {
        return Err(Error::invalid("decode on box with non-positive extent"));
    }
    let (acx, acy) = anchor.center();
    let cx = acx + t.tx * anchor.width();
    let cy = acy + t.ty * anchor.height();
    let w = anchor.width() * t.tw.exp();
    let h = anchor.height() * t.th.exp();
    Ok(BBox::new(
        cx - w * 0.5,
        cy - h * 0.5,
        cx + w * 0.5,
        cy + h * 0.5,
    ))
}

/// Indices ordered by descending score with stable tie-break on the
/// lower index.
pub(crate) fn score_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Greedy non-maximum suppression. Returns kept indices in descending
/// score order; never more than `max_keep`.
pub fn nms(boxes: &[BBox], scores: &[f64], iou_threshold: f64, max_keep: usize) -> Vec<usize> {
    assert_eq!(boxes.len(), scores.len(), "nms needs one score per box");
    let order = score_order(scores);
    let mut kept: Vec<usize> = Vec::new();
    for &i in &order {
        if kept.len() >= max_keep {
            break;
        }
        let suppressed = kept
            .iter()
            .any(|&j| iou_raw(&boxes[i], &boxes[j]) > iou_threshold);
        if !suppressed {
            kept.push(i);
        }
    }
    kept
}

/// Clamp boxes to the image and drop those whose post-clip width or
/// height falls below `min_size`. Returns (original index, clipped box).
pub fn clip_and_filter_proposals(
    boxes: &[BBox],
    image_w: f64,
    image_h: f64,
    min_size: f64,
) -> Vec<(usize, BBox)> {
    let mut out = Vec::new();
    for (i, b) in boxes.iter().enumerate() {
        let c = b.clamped(image_w, image_h);
        if c.width() >= min_size && c.height() >= min_size {
            out.push((i, c));
        }
    }
    out
}

/// Per-anchor training label from the RPN assignment rules.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RpnLabel {
    /// Foreground anchor with its encoded regression target.
    Positive(BoxDelta),
    Negative,
    Ignore,
}

impl RpnLabel {
    pub fn is_positive(&self) -> bool {
        matches!(self, RpnLabel::Positive(_))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct RpnSampleConfig {
    pub batch: usize,
    pub pos_fraction: f64,
    pub hi_thresh: f64,
    pub lo_thresh: f64,
}

impl Default for RpnSampleConfig {
    fn default() -> Self {
        RpnSampleConfig {
            batch: 256,
            pos_fraction: 0.5,
            hi_thresh: 0.7,
            lo_thresh: 0.3,
        }
    }
}

/// Keep `keep` of the `true` entries in `mask` (chosen uniformly at
/// random), flipping the rest to false.
fn subsample_mask(mask: &mut [bool], keep: usize, rng: &mut Rng) {
    let on: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
    if on.len() <= keep {
        return;
    }
    let mut order = on;
    rng.shuffle(&mut order);
    for &i in &order[keep..] {
        mask[i] = false;
    }
}

/// RPN label assignment.
///
/// Anchors crossing the image bounds are ignored. An anchor is positive
/// if its IoU with some ground truth exceeds `hi_thresh`, or if it is
/// the highest-IoU anchor for some ground truth (so every gt gets a
/// learning signal); negative if its best IoU is below `lo_thresh`;
/// otherwise ignored. Positives are subsampled to batch*pos_fraction
/// and negatives fill the remainder of the batch.
pub fn assign_rpn_labels(
    anchors: &[BBox],
    gt_boxes: &[BBox],
    image_w: f64,
    image_h: f64,
    cfg: &RpnSampleConfig,
    rng: &mut Rng,
) -> Result<Vec<RpnLabel>> {
    if !(0.0 <= cfg.lo_thresh && cfg.lo_thresh < cfg.hi_thresh && cfg.hi_thresh <= 1.0) {
        return Err(Error::invalid(format!(
            "rpn thresholds must satisfy 0 <= lo < hi <= 1, got lo={} hi={}",
            cfg.lo_thresh, cfg.hi_thresh
        )));
    }
    for g in gt_boxes {
        if !g.is_valid() {
            return Err(Error::invalid(format!("degenerate ground-truth box {g:?}")));
        }
    }
    let n = anchors.len();
    let in_bounds: Vec<bool> = anchors.iter().map(|a| a.inside(image_w, image_h)).collect();

    // per-anchor best IoU and matched gt
    let mut best_iou = vec![0.0f64; n];
    let mut best_gt = vec![usize::MAX; n];
    // per-gt best IoU over in-bounds anchors
    let mut gt_best = vec![0.0f64; gt_boxes.len()];
    for (i, a) in anchors.iter().enumerate() {
        if !in_bounds[i] {
            continue;
        }
        for (j, g) in gt_boxes.iter().enumerate() {
            let v = iou_raw(a, g);
            if v > best_iou[i] {
                best_iou[i] = v;
                best_gt[i] = j;
            }
            if v > gt_best[j] {
                gt_best[j] = v;
            }
        }
    }

    let mut pos = vec![false; n];
    let mut neg = vec![false; n];
    for i in 0..n {
        if !in_bounds[i] {
            continue;
        }
        if best_iou[i] > cfg.hi_thresh {
            pos[i] = true;
        } else if best_iou[i] < cfg.lo_thresh {
            neg[i] = true;
        }
    }
    // force-match: every gt with a positive-IoU in-bounds anchor claims all
    // anchors tying its best IoU
    for (j, g) in gt_boxes.iter().enumerate() {
        if gt_best[j] <= 0.0 {
            continue;
        }
        for (i, a) in anchors.iter().enumerate() {
            if in_bounds[i] && iou_raw(a, g) == gt_best[j] {
                pos[i] = true;
                neg[i] = false;
                if best_gt[i] == usize::MAX {
                    best_gt[i] = j;
                }
            }
        }
    }

    let max_pos = (cfg.batch as f64 * cfg.pos_fraction) as usize;
    subsample_mask(&mut pos, max_pos, rng);
    let n_pos = pos.iter().filter(|&&p| p).count();
    subsample_mask(&mut neg, cfg.batch.saturating_sub(n_pos), rng);

    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        if pos[i] {
            let target = encode(&anchors[i], &gt_boxes[best_gt[i]])?;
            labels.push(RpnLabel::Positive(target));
        } else if neg[i] {
            labels.push(RpnLabel::Negative);
        } else {
            labels.push(RpnLabel::Ignore);
        }
    }
    Ok(labels)
}

/// One sampled region for the detection head.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeadSample {
    pub roi: BBox,
    /// 0 is background.
    pub class: usize,
    /// Regression target, present only for foreground samples.
    pub target: Option<BoxDelta>,
}

#[derive(Clone, Copy, Debug)]
pub struct HeadSampleConfig {
    pub batch: usize,
    pub fg_fraction: f64,
    pub fg_thresh: f64,
    pub bg_lo: f64,
    pub bg_hi: f64,
}

impl Default for HeadSampleConfig {
    fn default() -> Self {
        HeadSampleConfig {
            batch: 128,
            fg_fraction: 0.25,
            fg_thresh: 0.5,
            bg_lo: 0.1,
            bg_hi: 0.5,
        }
    }
}

/// Detection-head minibatch sampling.
///
/// Foreground: best IoU with any gt >= fg_thresh (label = that gt's
/// class, target encoded against it). Background: best IoU in
/// [bg_lo, bg_hi) with label 0. Proposals below bg_lo are dropped.
/// Foreground is subsampled to batch*fg_fraction, background fills the
/// rest.
pub fn sample_head_minibatch(
    proposals: &[BBox],
    gt_boxes: &[GtBox],
    cfg: &HeadSampleConfig,
    rng: &mut Rng,
) -> Result<Vec<HeadSample>> {
    if !(0.0 <= cfg.bg_lo && cfg.bg_lo < cfg.bg_hi && cfg.bg_hi <= cfg.fg_thresh) {
        return Err(Error::invalid(format!(
            "head thresholds must satisfy 0 <= bg_lo < bg_hi <= fg_thresh, got {:?}",
            (cfg.bg_lo, cfg.bg_hi, cfg.fg_thresh)
        )));
    }
    let mut fg: Vec<(usize, usize)> = Vec::new(); // (proposal, gt)
    let mut bg: Vec<usize> = Vec::new();
    for (i, p) in proposals.iter().enumerate() {
        if !p.is_valid() {
            continue;
        }
        let mut best = 0.0f64;
        let mut best_gt = usize::MAX;
        for (j, g) in gt_boxes.iter().enumerate() {
            let v = iou_raw(p, &g.rect);
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
    if fg.is_empty() && bg.is_empty() {
        return Err(Error::DegenerateBatch);
    }

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

    let mut out = Vec::with_capacity(fg.len() + bg.len());
    for (i, j) in fg {
        let gt = &gt_boxes[j];
        out.push(HeadSample {
            roi: proposals[i],
            class: gt.class,
            target: Some(encode(&proposals[i], &gt.rect)?),
        });
    }
    for i in bg {
        out.push(HeadSample {
            roi: proposals[i],
            class: 0,
            target: None,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_identical_is_one() {
        let b = BBox::new(1.0, 2.0, 5.0, 7.0);
        assert_eq!(iou(&b, &b).unwrap(), 1.0);
    }

    #[test]
    fn iou_disjoint_is_zero() {
        let a = BBox::new(0.0, 0.0, 1.0, 1.0);
        let b = BBox::new(5.0, 5.0, 6.0, 6.0);
        assert_eq!(iou(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn iou_quarter_overlap() {
        // (0,0,10,10) vs (5,5,15,15): 25 / 175 = 1/7
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        let b = BBox::new(5.0, 5.0, 15.0, 15.0);
        assert!((iou(&a, &b).unwrap() - 1.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn iou_rejects_degenerate() {
        let a = BBox::new(0.0, 0.0, 0.0, 1.0);
        let b = BBox::new(0.0, 0.0, 1.0, 1.0);
        assert!(iou(&a, &b).is_err());
    }

    #[test]
    fn single_anchor_centered() {
        let grid = AnchorGrid::new(8, vec![8.0], vec![1.0]).unwrap();
        let anchors = generate_anchors(&grid, 1, 1);
        assert_eq!(anchors.len(), 1);
        let a = anchors[0];
        assert_eq!((a.x0, a.y0, a.x1, a.y1), (0.0, 0.0, 8.0, 8.0));
        assert_eq!(a.center(), (4.0, 4.0));
    }

    #[test]
    fn anchor_count() {
        let grid = AnchorGrid::new(8, vec![8.0, 16.0, 32.0], vec![0.5, 1.0, 2.0]).unwrap();
        assert_eq!(generate_anchors(&grid, 4, 5).len(), 180);
    }

    #[test]
    fn anchor_ratio_preserves_area() {
        let grid = AnchorGrid::new(16, vec![16.0], vec![2.0]).unwrap();
        let a = generate_anchors(&grid, 1, 1)[0];
        assert!((a.width() - 16.0 / 2f64.sqrt()).abs() < 1e-12);
        assert!((a.height() - 16.0 * 2f64.sqrt()).abs() < 1e-12);
        assert!((a.area() - 256.0).abs() < 1e-9);
    }

    #[test]
    fn encode_identity_is_zero() {
        let a = BBox::new(2.0, 3.0, 10.0, 9.0);
        let d = encode(&a, &a).unwrap();
        assert_eq!(d, BoxDelta::default());
    }

    #[test]
    fn decode_zero_is_identity() {
        let a = BBox::new(2.0, 3.0, 10.0, 9.0);
        let b = decode(&a, &BoxDelta::default()).unwrap();
        assert!((b.x0 - a.x0).abs() < 1e-12);
        assert!((b.y1 - a.y1).abs() < 1e-12);
    }

    #[test]
    fn encode_known_values() {
        // anchor (0,0,10,10), gt (2,2,14,14): tx=ty=0.3, tw=th=ln 1.2
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        let g = BBox::new(2.0, 2.0, 14.0, 14.0);
        let d = encode(&a, &g).unwrap();
        assert!((d.tx - 0.3).abs() < 1e-12);
        assert!((d.ty - 0.3).abs() < 1e-12);
        assert!((d.tw - 1.2f64.ln()).abs() < 1e-12);
        assert!((d.th - 1.2f64.ln()).abs() < 1e-12);
        let back = decode(&a, &d).unwrap();
        assert!((back.x0 - g.x0).abs() < 1e-9);
        assert!((back.y1 - g.y1).abs() < 1e-9);
    }

    #[test]
    fn nms_single_box_kept() {
        let boxes = [BBox::new(0.0, 0.0, 1.0, 1.0)];
        assert_eq!(nms(&boxes, &[0.9], 0.5, 10), vec![0]);
    }

    #[test]
    fn nms_suppresses_duplicate() {
        let b = BBox::new(0.0, 0.0, 4.0, 4.0);
        let kept = nms(&[b, b], &[0.9, 0.8], 0.5, 10);
        assert_eq!(kept, vec![0]);
    }

    #[test]
    fn clip_keeps_inner_box() {
        let b = BBox::new(1.0, 1.0, 3.0, 3.0);
        let out = clip_and_filter_proposals(&[b], 10.0, 10.0, 1.0);
        assert_eq!(out, vec![(0, b)]);
    }

    #[test]
    fn clip_clamps_to_image() {
        let b = BBox::new(-5.0, -5.0, 3.0, 3.0);
        let out = clip_and_filter_proposals(&[b], 10.0, 10.0, 1.0);
        assert_eq!(out[0].1, BBox::new(0.0, 0.0, 3.0, 3.0));
    }

    #[test]
    fn rpn_anchor_on_gt_is_positive_zero_target() {
        let gt = BBox::new(8.0, 8.0, 24.0, 24.0);
        let anchors = vec![gt, BBox::new(40.0, 40.0, 56.0, 56.0)];
        let mut rng = Rng::new(1);
        let labels = assign_rpn_labels(
            &anchors,
            &[gt],
            64.0,
            64.0,
            &RpnSampleConfig::default(),
            &mut rng,
        )
        .unwrap();
        match labels[0] {
            RpnLabel::Positive(d) => assert_eq!(d, BoxDelta::default()),
            ref other => panic!("expected positive, got {other:?}"),
        }
        assert_eq!(labels[1], RpnLabel::Negative);
    }

    #[test]
    fn rpn_no_gt_all_negative() {
        let anchors: Vec<BBox> = (0..10)
            .map(|i| BBox::new(i as f64, 0.0, i as f64 + 4.0, 4.0))
            .collect();
        let mut rng = Rng::new(2);
        let labels = assign_rpn_labels(
            &anchors,
            &[],
            64.0,
            64.0,
            &RpnSampleConfig::default(),
            &mut rng,
        )
        .unwrap();
        assert!(labels.iter().all(|l| *l == RpnLabel::Negative));
    }

    #[test]
    fn rpn_out_of_bounds_ignored() {
        let anchors = vec![BBox::new(-1.0, 0.0, 4.0, 4.0)];
        let mut rng = Rng::new(3);
        let labels = assign_rpn_labels(
            &anchors,
            &[],
            64.0,
            64.0,
            &RpnSampleConfig::default(),
            &mut rng,
        )
        .unwrap();
        assert_eq!(labels[0], RpnLabel::Ignore);
    }

    #[test]
    fn head_proposal_on_gt_is_foreground() {
        let gt = GtBox::new(BBox::new(4.0, 4.0, 20.0, 20.0), 3);
        let mut rng = Rng::new(4);
        let samples = sample_head_minibatch(
            &[gt.rect],
            &[gt],
            &HeadSampleConfig::default(),
            &mut rng,
        )
        .unwrap();
        assert_eq!(samples.len(), 1);
        assert_eq!(samples[0].class, 3);
        assert_eq!(samples[0].target, Some(BoxDelta::default()));
    }

    #[test]
    fn head_low_iou_excluded_entirely() {
        // IoU ~ 0.05 is below the background floor 0.1
        let gt = GtBox::new(BBox::new(0.0, 0.0, 10.0, 10.0), 1);
        let far = BBox::new(9.0, 9.0, 19.0, 19.0); // IoU = 1/199
        let near = BBox::new(0.0, 0.0, 10.0, 5.0); // IoU = 0.5 -> fg
        let mut rng = Rng::new(5);
        let samples = sample_head_minibatch(
            &[far, near],
            &[gt],
            &HeadSampleConfig::default(),
            &mut rng,
        )
        .unwrap();
        assert_eq!(samples.len(), 1);
        assert_eq!(samples[0].roi, near);
    }

    #[test]
    fn head_empty_pools_is_degenerate() {
        let gt = GtBox::new(BBox::new(0.0, 0.0, 10.0, 10.0), 1);
        let far = BBox::new(50.0, 50.0, 60.0, 60.0);
        let mut rng = Rng::new(6);
        let err = sample_head_minibatch(&[far], &[gt], &HeadSampleConfig::default(), &mut rng);
        assert!(matches!(err, Err(Error::DegenerateBatch)));
    }
}
