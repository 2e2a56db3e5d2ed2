//! Detection and segmentation evaluation: greedy matching with ignore
//! regions, all-points interpolated average precision, size-stratified
//! mAP, and confusion-matrix segmentation metrics.

use std::fs;
use std::path::Path;

use crate::boxgeom::{iou_raw, BBox, Detection, GtBox};
use crate::data::LabelMap;
use crate::error::{Error, Result};

/// Area ceilings for the size strata, in square pixels.
#[derive(Clone, Copy, Debug)]
pub struct SizeBins {
    pub small_max_area: f64,
    pub medium_max_area: f64,
}

impl Default for SizeBins {
    fn default() -> Self {
        SizeBins {
            small_max_area: 32.0 * 32.0,
            medium_max_area: 96.0 * 96.0,
        }
    }
}

impl SizeBins {
    pub fn new(small_max_area: f64, medium_max_area: f64) -> Result<SizeBins> {
        if !(0.0 < small_max_area && small_max_area < medium_max_area) {
            return Err(Error::invalid(format!(
                "size bins need 0 < small < medium, got {small_max_area} / {medium_max_area}"
            )));
        }
        Ok(SizeBins {
            small_max_area,
            medium_max_area,
        })
    }

    /// Bins scaled for images `factor` times the reference size (areas
    /// scale with the square).
    pub fn scaled(&self, factor: f64) -> Result<SizeBins> {
        SizeBins::new(
            self.small_max_area * factor * factor,
            self.medium_max_area * factor * factor,
        )
    }

    pub fn bin_of(&self, area: f64) -> SizeBin {
        if area < self.small_max_area {
            SizeBin::Small
        } else if area < self.medium_max_area {
            SizeBin::Medium
        } else {
            SizeBin::Large
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SizeBin {
    All,
    Small,
    Medium,
    Large,
}

impl SizeBin {
    pub fn parse(s: &str) -> Result<SizeBin> {
        match s {
            "all" => Ok(SizeBin::All),
            "small" => Ok(SizeBin::Small),
            "medium" => Ok(SizeBin::Medium),
            "large" => Ok(SizeBin::Large),
            other => Err(Error::invalid(format!(
                "unknown size bin {other:?}, expected all|small|medium|large"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SizeBin::All => "all",
            SizeBin::Small => "small",
            SizeBin::Medium => "medium",
            SizeBin::Large => "large",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    TruePositive,
    FalsePositive,
    /// Matched only an ignore-flagged ground truth; excluded from both
    /// precision and recall.
    Ignored,
}

/// Greedy matching of one class's detections against its ground truths.
///
/// Detections are processed in descending score order (ties keep input
/// order). Each one matches the highest-IoU unmatched non-ignore gt at
/// or above the threshold; failing that, an overlap with any ignore gt
/// at the threshold makes it `Ignored`; otherwise it is a false
/// positive. Returns (score, verdict) in the processing order.
pub fn match_detections(
    dets: &[(BBox, f64)],
    gts: &[GtBox],
    iou_thresh: f64,
) -> Vec<(f64, Verdict)> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].1.total_cmp(&dets[a].1).then(a.cmp(&b)));
    let mut matched = vec![false; gts.len()];
    let mut out = Vec::with_capacity(dets.len());
    for &i in &order {
        let (rect, score) = dets[i];
        let mut best = 0.0f64;
        let mut best_gt = usize::MAX;
        let mut best_ignore = 0.0f64;
        for (j, gt) in gts.iter().enumerate() {
            let v = iou_raw(&rect, &gt.rect);
            if gt.ignore {
                if v > best_ignore {
                    best_ignore = v;
                }
            } else if !matched[j] && v > best {
                best = v;
                best_gt = j;
            }
        }
        let verdict = if best >= iou_thresh && best_gt != usize::MAX {
            matched[best_gt] = true;
            Verdict::TruePositive
        } else if best_ignore >= iou_thresh {
            Verdict::Ignored
        } else {
            Verdict::FalsePositive
        };
        out.push((score, verdict));
    }
    out
}

/// Area under the monotone (running-max interpolated) precision
/// envelope over all recall points. Verdicts must be in descending
/// score order; ignored entries contribute nothing.
pub fn average_precision(verdicts: &[Verdict], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut points: Vec<(f64, f64)> = Vec::new(); // (recall, precision)
    for v in verdicts {
        match v {
            Verdict::TruePositive => tp += 1,
            Verdict::FalsePositive => fp += 1,
            Verdict::Ignored => continue,
        }
        points.push((tp as f64 / n_gt as f64, tp as f64 / (tp + fp) as f64));
    }
    // precision envelope from the right
    let mut env = points.clone();
    for i in (0..env.len().saturating_sub(1)).rev() {
        env[i].1 = env[i].1.max(env[i + 1].1);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for &(r, p) in &env {
        if r > prev_recall {
            ap += (r - prev_recall) * p;
            prev_recall = r;
        }
    }
    ap
}

/// Detections and ground truths of one image.
#[derive(Clone, Debug, Default)]
pub struct ImageEval {
    pub dets: Vec<Detection>,
    pub gts: Vec<GtBox>,
}

/// Detection evaluation report.
#[derive(Clone, Debug)]
pub struct EvalReport {
    /// AP per object class, indexed by class id - 1.
    pub per_class_ap: Vec<f64>,
    /// Non-ignored ground truths per class.
    pub gt_counts: Vec<usize>,
    /// Unweighted mean of per-class AP over classes with at least one
    /// counted ground truth; 0 when no class has any.
    pub map: f64,
    pub per_bin: Option<Vec<(SizeBin, f64)>>,
    pub seg: Option<SegReport>,
}

impl EvalReport {
    /// Classes with zero counted ground truths (their AP slot is 0 and
    /// excluded from the mean).
    pub fn counted_classes(&self) -> usize {
        self.gt_counts.iter().filter(|&&n| n > 0).count()
    }
}

/// Mean AP over object classes 1..=num_classes. When a size bin is
/// given, ground truths outside the bin are flagged ignore before
/// matching (detections matching them count neither way).
pub fn evaluate_map(
    images: &[ImageEval],
    num_object_classes: usize,
    iou_thresh: f64,
    size_filter: Option<(SizeBin, SizeBins)>,
) -> EvalReport {
    let mut per_class_ap = vec![0.0; num_object_classes];
    let mut gt_counts = vec![0usize; num_object_classes];
    for class in 1..=num_object_classes {
        // (score, image index, within-image order, verdict)
        let mut pooled: Vec<(f64, usize, usize, Verdict)> = Vec::new();
        let mut n_gt = 0usize;
        for (img_i, img) in images.iter().enumerate() {
            let dets: Vec<(BBox, f64)> = img
                .dets
                .iter()
                .filter(|d| d.class == class)
                .map(|d| (d.rect, d.score))
                .collect();
            let gts: Vec<GtBox> = img
                .gts
                .iter()
                .filter(|g| g.class == class)
                .map(|g| {
                    let mut g = *g;
                    if let Some((bin, bins)) = &size_filter {
                        if *bin != SizeBin::All && bins.bin_of(g.rect.area()) != *bin {
                            g.ignore = true;
                        }
                    }
                    g
                })
                .collect();
            n_gt += gts.iter().filter(|g| !g.ignore).count();
            for (pos, (score, verdict)) in match_detections(&dets, &gts, iou_thresh)
                .into_iter()
                .enumerate()
            {
                pooled.push((score, img_i, pos, verdict));
            }
        }
        pooled.sort_by(|a, b| {
            b.0.total_cmp(&a.0)
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        let verdicts: Vec<Verdict> = pooled.iter().map(|p| p.3).collect();
        per_class_ap[class - 1] = average_precision(&verdicts, n_gt);
        gt_counts[class - 1] = n_gt;
    }
    let counted: Vec<f64> = per_class_ap
        .iter()
        .zip(&gt_counts)
        .filter(|(_, &n)| n > 0)
        .map(|(&ap, _)| ap)
        .collect();
    let map = if counted.is_empty() {
        0.0
    } else {
        counted.iter().sum::<f64>() / counted.len() as f64
    };
    EvalReport {
        per_class_ap,
        gt_counts,
        map,
        per_bin: None,
        seg: None,
    }
}

/// Segmentation metrics from the K x K confusion matrix.
#[derive(Clone, Debug)]
pub struct SegReport {
    /// IoU per class; None when the class appears in neither prediction
    /// nor ground truth.
    pub per_class_iou: Vec<Option<f64>>,
    /// Mean over present classes.
    pub mean_iou: f64,
    pub pixel_accuracy: f64,
}

pub fn seg_metrics(pred: &LabelMap, gt: &LabelMap, k: usize) -> Result<SegReport> {
    if pred.w != gt.w || pred.h != gt.h {
        return Err(Error::shape(format!(
            "segmentation maps differ: {}x{} vs {}x{}",
            pred.w, pred.h, gt.w, gt.h
        )));
    }
    let mut confusion = vec![0u64; k * k];
    for (p, g) in pred.data.iter().zip(&gt.data) {
        let (p, g) = (*p as usize, *g as usize);
        if p >= k || g >= k {
            return Err(Error::invalid(format!(
                "label out of range for {k} classes: pred {p}, gt {g}"
            )));
        }
        confusion[g * k + p] += 1;
    }
    accumulate_seg_report(&confusion, k)
}

/// Metrics for a whole dataset: one confusion matrix pooled over all
/// map pairs.
pub fn seg_metrics_many<'a>(
    pairs: impl Iterator<Item = (&'a LabelMap, &'a LabelMap)>,
    k: usize,
) -> Result<SegReport> {
    let mut confusion = vec![0u64; k * k];
    let mut any = false;
    for (pred, gt) in pairs {
        any = true;
        if pred.w != gt.w || pred.h != gt.h {
            return Err(Error::shape("segmentation maps differ in size"));
        }
        for (p, g) in pred.data.iter().zip(&gt.data) {
            let (p, g) = (*p as usize, *g as usize);
            if p >= k || g >= k {
                return Err(Error::invalid(format!(
                    "label out of range for {k} classes: pred {p}, gt {g}"
                )));
            }
            confusion[g * k + p] += 1;
        }
    }
    if !any {
        return Err(Error::invalid("no segmentation map pairs to evaluate"));
    }
    accumulate_seg_report(&confusion, k)
}

fn accumulate_seg_report(confusion: &[u64], k: usize) -> Result<SegReport> {
    let total: u64 = confusion.iter().sum();
    let mut per_class_iou = Vec::with_capacity(k);
    let mut present = Vec::new();
    let mut trace = 0u64;
    for c in 0..k {
        let tp = confusion[c * k + c];
        trace += tp;
        let fn_: u64 = (0..k).filter(|&j| j != c).map(|j| confusion[c * k + j]).sum();
        let fp: u64 = (0..k).filter(|&j| j != c).map(|j| confusion[j * k + c]).sum();
        let denom = tp + fp + fn_;
        if denom == 0 {
            per_class_iou.push(None);
        } else {
            let iou = tp as f64 / denom as f64;
            per_class_iou.push(Some(iou));
            present.push(iou);
        }
    }
    let mean_iou = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    Ok(SegReport {
        per_class_iou,
        mean_iou,
        pixel_accuracy: trace as f64 / total as f64,
    })
}

// ---------------------------------------------------------------------------
// detection dump format: "image_id class score x0 y0 x1 y1" per line

pub fn detections_to_text(entries: &[(String, Detection)]) -> String {
    let mut s = String::new();
    for (id, d) in entries {
        s.push_str(&format!(
            "{id} {} {:?} {:?} {:?} {:?} {:?}\n",
            d.class, d.score, d.rect.x0, d.rect.y0, d.rect.x1, d.rect.y1
        ));
    }
    s
}

pub fn detections_from_text(text: &str, path: &str) -> Result<Vec<(String, Detection)>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let bad = |what: &str| {
            Error::malformed(path, lineno + 1, format!("{what} in detection line {line:?}"))
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 7 {
            return Err(bad("expected 7 fields"));
        }
        let class: usize = fields[1].parse().map_err(|_| bad("bad class"))?;
        let mut nums = [0.0f64; 5];
        for (i, f) in fields[2..].iter().enumerate() {
            nums[i] = f.parse().map_err(|_| bad("bad number"))?;
        }
        out.push((
            fields[0].to_string(),
            Detection {
                rect: BBox::new(nums[1], nums[2], nums[3], nums[4]),
                class,
                score: nums[0],
            },
        ));
    }
    Ok(out)
}

pub fn write_detections(path: &Path, entries: &[(String, Detection)]) -> Result<()> {
    fs::write(path, detections_to_text(entries))
        .map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_detections(path: &Path) -> Result<Vec<(String, Detection)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    detections_from_text(&text, &path.display().to_string())
}
