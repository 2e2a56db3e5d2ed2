//! Joint loss assembly, SGD with momentum and weight decay, the step
//! learning-rate schedule, the training loop, and feature constraining
//! (training against hallucinated segmentation targets on datasets that
//! lack stuff labels).

use std::collections::BTreeMap;

use crate::boxgeom::{
    assign_rpn_labels, sample_head_minibatch, BBox, GtBox, HeadSample, HeadSampleConfig,
    RpnLabel, RpnSampleConfig,
};
use crate::data::{Dataset, LabelMap, SceneSample};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::layers;
use crate::model::{Features, Model, ProposalConfig, RpnNodes};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Relative weights of the five loss terms.
#[derive(Clone, Copy, Debug)]
pub struct LossWeights {
    pub rpn_cls: f64,
    pub rpn_reg: f64,
    pub head_cls: f64,
    pub head_reg: f64,
    pub seg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            rpn_cls: 1.0,
            rpn_reg: 1.0,
            head_cls: 1.0,
            head_reg: 1.0,
            seg: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("rpn_cls", self.rpn_cls),
            ("rpn_reg", self.rpn_reg),
            ("head_cls", self.head_cls),
            ("head_reg", self.head_reg),
            ("seg", self.seg),
        ] {
            if w < 0.0 {
                return Err(Error::invalid(format!("negative loss weight {name}={w}")));
            }
        }
        Ok(())
    }
}

/// The five per-term loss values of one step, each already normalized
/// by its own datapoint count (regions for the detection terms, pixels
/// for segmentation).
#[derive(Clone, Copy, Debug, Default)]
pub struct LossTerms {
    pub rpn_cls: f64,
    pub rpn_reg: f64,
    pub head_cls: f64,
    pub head_reg: f64,
    pub seg: f64,
}

/// Weighted sum of the loss terms.
pub fn total_loss(terms: &LossTerms, weights: &LossWeights) -> Result<f64> {
    weights.validate()?;
    Ok(weights.rpn_cls * terms.rpn_cls
        + weights.rpn_reg * terms.rpn_reg
        + weights.head_cls * terms.head_cls
        + weights.head_reg * terms.head_reg
        + weights.seg * terms.seg)
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub iterations: usize,
    pub base_lr: f64,
    /// Iteration at which the rate drops by `lr_factor`.
    pub lr_step: usize,
    pub lr_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub rpn: RpnSampleConfig,
    pub head: HeadSampleConfig,
    pub proposals: ProposalConfig,
    pub seed: u64,
    pub loss_weights: LossWeights,
}

impl TrainConfig {
    /// Full-scale schedule: 70k iterations, step at 50k.
    pub fn paper_scale() -> TrainConfig {
        TrainConfig {
            iterations: 70_000,
            base_lr: 1e-3,
            lr_step: 50_000,
            lr_factor: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            rpn: RpnSampleConfig::default(),
            head: HeadSampleConfig::default(),
            proposals: ProposalConfig::default(),
            seed: 0,
            loss_weights: LossWeights::default(),
        }
    }

    /// Desk-scale schedule: 2k iterations, step at 1500.
    pub fn desk() -> TrainConfig {
        TrainConfig {
            iterations: 2_000,
            lr_step: 1_500,
            ..TrainConfig::paper_scale()
        }
    }
}

/// Step learning-rate policy: base before the boundary, base * factor
/// at and after it.
pub fn lr_at(cfg: &TrainConfig, iter: usize) -> f64 {
    if iter < cfg.lr_step {
        cfg.base_lr
    } else {
        cfg.base_lr * cfg.lr_factor
    }
}

/// Momentum buffers, one per parameter.
#[derive(Clone, Debug, Default)]
pub struct SgdState {
    velocity: BTreeMap<String, Vec<f64>>,
}

impl SgdState {
    pub fn new() -> SgdState {
        SgdState::default()
    }
}

/// One SGD update: v <- momentum*v - lr*(g + weight_decay*w),
/// w <- w + v. Parameters without a gradient entry still receive the
/// weight-decay pull.
pub fn sgd_step(
    params: &mut BTreeMap<String, Tensor>,
    grads: &BTreeMap<String, Vec<f64>>,
    state: &mut SgdState,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    for (name, g) in grads {
        match params.get(name) {
            None => return Err(Error::invalid(format!("gradient for unknown param {name}"))),
            Some(p) if p.numel() != g.len() => {
                return Err(Error::shape(format!(
                    "gradient for {name} has {} elements, param has {}",
                    g.len(),
                    p.numel()
                )))
            }
            _ => {}
        }
    }
    for (name, w) in params.iter_mut() {
        let v = state
            .velocity
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; w.numel()]);
        let zero = vec![];
        let g = grads.get(name).map(|g| g.as_slice()).unwrap_or(&zero);
        let wd = w.data_mut();
        for i in 0..wd.len() {
            let gi = g.get(i).copied().unwrap_or(0.0);
            v[i] = momentum * v[i] - lr * (gi + weight_decay * wd[i]);
            wd[i] += v[i];
        }
    }
    Ok(())
}

/// One line of the training log.
#[derive(Clone, Copy, Debug)]
pub struct LossRecord {
    pub iter: usize,
    pub terms: LossTerms,
    pub total: f64,
}

impl LossRecord {
    pub fn log_line(&self) -> String {
        format!(
            "iter {} rpn_cls {:.6} rpn_reg {:.6} head_cls {:.6} head_reg {:.6} seg {:.6} total {:.6}",
            self.iter,
            self.terms.rpn_cls,
            self.terms.rpn_reg,
            self.terms.head_cls,
            self.terms.head_reg,
            self.terms.seg,
            self.total
        )
    }
}

/// Mean of the total loss over the `window` iterations ending just
/// before `end` (so `end` = 100 averages iterations 0..100).
pub fn smoothed_total(log: &[LossRecord], window: usize, end: usize) -> f64 {
    let end = end.min(log.len());
    let start = end.saturating_sub(window);
    let slice = &log[start..end];
    slice.iter().map(|r| r.total).sum::<f64>() / slice.len().max(1) as f64
}

/// Dense per-image segmentation targets produced by a trained model,
/// with a provenance tag identifying the source weights.
#[derive(Clone, Debug)]
pub struct HallucinatedLabels {
    pub maps: Vec<LabelMap>,
    pub source: String,
}

/// Everything sampled for one training step. Frozen plans make the loss
/// a differentiable function of the parameters, which the gradient
/// checks rely on.
#[derive(Clone, Debug)]
pub struct StepPlan {
    pub rpn_labels: Vec<RpnLabel>,
    pub head_samples: Vec<HeadSample>,
    pub seg_target: Option<LabelMap>,
}

fn make_plan(
    anchors: &[BBox],
    proposals: &[(BBox, f64)],
    sample: &SceneSample,
    seg_target: Option<&LabelMap>,
    cfg: &TrainConfig,
    iter: usize,
) -> Result<StepPlan> {
    let (w, h) = (sample.width() as f64, sample.height() as f64);
    let gt_rects: Vec<BBox> = sample.boxes.iter().map(|b| b.rect).collect();
    let mut rpn_rng = Rng::stream_indexed(cfg.seed, "train/rpn", iter as u64);
    let rpn_labels = assign_rpn_labels(anchors, &gt_rects, w, h, &cfg.rpn, &mut rpn_rng)?;

    // ground-truth boxes join the candidate pool so foreground samples
    // exist from the first iteration
    let mut candidates: Vec<BBox> = proposals.iter().map(|p| p.0).collect();
    candidates.extend(gt_rects.iter().copied());
    let gts: Vec<GtBox> = sample.boxes.clone();
    let mut head_rng = Rng::stream_indexed(cfg.seed, "train/head", iter as u64);
    let head_samples = sample_head_minibatch(&candidates, &gts, &cfg.head, &mut head_rng)?;

    Ok(StepPlan {
        rpn_labels,
        head_samples,
        seg_target: seg_target.cloned(),
    })
}

/// Sample a step plan for one image exactly as the training loop does
/// at iteration `iter` (the forward pass for proposals included).
pub fn plan_step(
    model: &Model,
    sample: &SceneSample,
    seg_target: Option<&LabelMap>,
    cfg: &TrainConfig,
    iter: usize,
) -> Result<StepPlan> {
    let image = sample.batch_image();
    let mut g = Graph::new();
    let feats = model.features(&mut g, &image)?;
    let rpn = model.rpn(&mut g, &feats)?;
    let props = model.proposals(&g, &rpn, feats.image_w, feats.image_h, &cfg.proposals)?;
    make_plan(&rpn.anchors, &props, sample, seg_target, cfg, iter)
}

/// Index mapping [1, K, H, W] scores to [H*W, K] rows for the pixel
/// cross-entropy.
fn pixel_major_index(k: usize, h: usize, w: usize) -> Vec<usize> {
    let mut index = Vec::with_capacity(h * w * k);
    for y in 0..h {
        for x in 0..w {
            for c in 0..k {
                index.push((c * h + y) * w + x);
            }
        }
    }
    index
}

/// Build all loss terms on an existing graph holding the feature and
/// RPN nodes for `sample`, following the frozen `plan`.
fn assemble_losses(
    model: &Model,
    g: &mut Graph,
    feats: &Features,
    rpn: &RpnNodes,
    plan: &StepPlan,
    weights: &LossWeights,
) -> Result<(NodeId, LossTerms)> {
    weights.validate()?;
    let mut terms = LossTerms::default();
    let mut weighted: Vec<NodeId> = Vec::new();

    // RPN objectness
    let rpn_cls_labels: Vec<Option<usize>> = plan
        .rpn_labels
        .iter()
        .map(|l| match l {
            RpnLabel::Positive(_) => Some(1),
            RpnLabel::Negative => Some(0),
            RpnLabel::Ignore => None,
        })
        .collect();
    let rpn_cls = layers::softmax_cross_entropy(g, rpn.scores, &rpn_cls_labels)?;
    terms.rpn_cls = g.scalar(rpn_cls);
    weighted.push(g.scale(rpn_cls, weights.rpn_cls)?);

    // RPN box regression over positive anchors
    let n_anchors = plan.rpn_labels.len();
    let n_pos = plan.rpn_labels.iter().filter(|l| l.is_positive()).count();
    if n_pos > 0 {
        let mut target = Tensor::zeros(&[n_anchors, 4])?;
        let mut mask = Tensor::zeros(&[n_anchors, 4])?;
        for (i, l) in plan.rpn_labels.iter().enumerate() {
            if let RpnLabel::Positive(d) = l {
                let t = target.data_mut();
                t[4 * i] = d.tx;
                t[4 * i + 1] = d.ty;
                t[4 * i + 2] = d.tw;
                t[4 * i + 3] = d.th;
                mask.data_mut()[4 * i..4 * i + 4].fill(1.0);
            }
        }
        let tn = g.leaf(target);
        let mn = g.leaf(mask);
        let diff = g.sub(rpn.deltas, tn)?;
        let masked = g.mul(diff, mn)?;
        let sl = layers::smooth_l1(g, masked)?;
        let total = g.sum(sl)?;
        let reg = g.scale(total, 1.0 / n_pos as f64)?;
        terms.rpn_reg = g.scalar(reg);
        weighted.push(g.scale(reg, weights.rpn_reg)?);
    }

    // detection head
    let rois: Vec<BBox> = plan.head_samples.iter().map(|s| s.roi).collect();
    let head = model.detection_head(g, feats, &rois)?;
    let head_labels: Vec<Option<usize>> = plan
        .head_samples
        .iter()
        .map(|s| Some(s.class))
        .collect();
    let head_cls = layers::softmax_cross_entropy(g, head.cls, &head_labels)?;
    terms.head_cls = g.scalar(head_cls);
    weighted.push(g.scale(head_cls, weights.head_cls)?);

    let c = model.spec().num_classes;
    let n_fg = plan
        .head_samples
        .iter()
        .filter(|s| s.target.is_some())
        .count();
    if n_fg > 0 {
        let m = plan.head_samples.len();
        let mut target = Tensor::zeros(&[m, 4 * c])?;
        let mut mask = Tensor::zeros(&[m, 4 * c])?;
        for (i, s) in plan.head_samples.iter().enumerate() {
            if let Some(d) = &s.target {
                let o = i * 4 * c + 4 * s.class;
                let t = target.data_mut();
                t[o] = d.tx;
                t[o + 1] = d.ty;
                t[o + 2] = d.tw;
                t[o + 3] = d.th;
                mask.data_mut()[o..o + 4].fill(1.0);
            }
        }
        let tn = g.leaf(target);
        let mn = g.leaf(mask);
        let diff = g.sub(head.bbox, tn)?;
        let masked = g.mul(diff, mn)?;
        let sl = layers::smooth_l1(g, masked)?;
        let total = g.sum(sl)?;
        let reg = g.scale(total, 1.0 / n_fg as f64)?;
        terms.head_reg = g.scalar(reg);
        weighted.push(g.scale(reg, weights.head_reg)?);
    }

    // segmentation softmax over every pixel of the upsampled map
    if model.spec().variant.has_seg_branch() {
        let target = plan.seg_target.as_ref().ok_or_else(|| {
            Error::MissingSegLabels("step plan has no segmentation target".into())
        })?;
        let scores = model.seg_scores(g, feats)?;
        let d = g.value(scores).dims().to_vec();
        let (k, h, w) = (d[1], d[2], d[3]);
        if target.w != w || target.h != h {
            return Err(Error::shape(format!(
                "segmentation target {}x{} does not match map {w}x{h}",
                target.w, target.h
            )));
        }
        let rows = g.gather(scores, pixel_major_index(k, h, w), &[h * w, k])?;
        let labels: Vec<Option<usize>> = target.data.iter().map(|&v| Some(v as usize)).collect();
        let seg = layers::softmax_cross_entropy(g, rows, &labels)?;
        terms.seg = g.scalar(seg);
        weighted.push(g.scale(seg, weights.seg)?);
    }

    let mut total = weighted[0];
    for &node in &weighted[1..] {
        total = g.add(total, node)?;
    }
    Ok((total, terms))
}

/// Rebuild the full loss graph for a frozen plan. The returned graph
/// has not been differentiated yet.
pub fn step_loss(
    model: &Model,
    sample: &SceneSample,
    plan: &StepPlan,
    weights: &LossWeights,
) -> Result<(Graph, NodeId, LossTerms)> {
    let image = sample.batch_image();
    let mut g = Graph::new();
    let feats = model.features(&mut g, &image)?;
    let rpn = model.rpn(&mut g, &feats)?;
    let (total, terms) = assemble_losses(model, &mut g, &feats, &rpn, plan, weights)?;
    Ok((g, total, terms))
}

/// An in-progress training run that owns its model, dataset, and
/// optimizer state, advancing one iteration per [`TrainSession::step`].
/// [`train`] and [`train_constrained`] drive this same machinery, so
/// incremental and one-shot training follow identical code paths.
pub struct TrainSession {
    model: Model,
    data: Dataset,
    /// Fixed (hallucinated) targets; None means the dataset's own labels.
    fixed_targets: Option<Vec<LabelMap>>,
    cfg: TrainConfig,
    state: SgdState,
    sample_rng: Rng,
    iter: usize,
    log: Vec<LossRecord>,
}

impl TrainSession {
    pub fn new(model: Model, data: Dataset, cfg: TrainConfig) -> Result<TrainSession> {
        TrainSession::with_targets(model, data, None, cfg)
    }

    pub fn new_constrained(
        model: Model,
        data: Dataset,
        labels: &HallucinatedLabels,
        cfg: TrainConfig,
    ) -> Result<TrainSession> {
        TrainSession::with_targets(model, data, Some(labels.maps.clone()), cfg)
    }

    fn with_targets(
        model: Model,
        data: Dataset,
        fixed_targets: Option<Vec<LabelMap>>,
        cfg: TrainConfig,
    ) -> Result<TrainSession> {
        if data.is_empty() {
            return Err(Error::invalid("training dataset is empty"));
        }
        cfg.loss_weights.validate()?;
        if model.spec().variant.has_seg_branch() {
            match &fixed_targets {
                None => {
                    if let Some(i) = data.samples.iter().position(|s| s.seg.is_none()) {
                        return Err(Error::MissingSegLabels(format!(
                            "sample {} has no segmentation labels; train the baseline variant or supply hallucinated labels",
                            data.ids[i]
                        )));
                    }
                }
                Some(maps) => {
                    if maps.len() != data.len() {
                        return Err(Error::MissingSegLabels(format!(
                            "{} hallucinated maps for {} images",
                            maps.len(),
                            data.len()
                        )));
                    }
                }
            }
        }
        let sample_rng = Rng::stream(cfg.seed, "train/sample");
        Ok(TrainSession {
            model,
            data,
            fixed_targets,
            cfg,
            state: SgdState::new(),
            sample_rng,
            iter: 0,
            log: Vec::new(),
        })
    }

    pub fn iteration(&self) -> usize {
        self.iter
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn log(&self) -> &[LossRecord] {
        &self.log
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn into_parts(self) -> (Model, Vec<LossRecord>) {
        (self.model, self.log)
    }

    /// One iteration: sample an image, forward, sample the minibatch,
    /// assemble losses, backward, SGD update.
    pub fn step(&mut self) -> Result<LossRecord> {
        let iter = self.iter;
        let idx = self.sample_rng.below(self.data.len());
        let sample = &self.data.samples[idx];
        let seg_target = if self.model.spec().variant.has_seg_branch() {
            Some(match &self.fixed_targets {
                None => sample.seg.as_ref().expect("validated at construction"),
                Some(maps) => &maps[idx],
            })
        } else {
            None
        };

        let image = sample.batch_image();
        let mut g = Graph::new();
        let feats = self.model.features(&mut g, &image)?;
        let rpn = self.model.rpn(&mut g, &feats)?;
        let props = self
            .model
            .proposals(&g, &rpn, feats.image_w, feats.image_h, &self.cfg.proposals)?;
        let plan = make_plan(&rpn.anchors, &props, sample, seg_target, &self.cfg, iter)?;
        let (total, terms) =
            assemble_losses(&self.model, &mut g, &feats, &rpn, &plan, &self.cfg.loss_weights)?;
        let record = LossRecord {
            iter,
            terms,
            total: g.scalar(total),
        };
        g.backward(total)?;
        let grads: BTreeMap<String, Vec<f64>> = g
            .param_grads()
            .map(|(n, gr)| (n.to_string(), gr.to_vec()))
            .collect();
        sgd_step(
            self.model.params_mut(),
            &grads,
            &mut self.state,
            lr_at(&self.cfg, iter),
            self.cfg.momentum,
            self.cfg.weight_decay,
        )?;
        self.iter += 1;
        self.log.push(record);
        Ok(record)
    }

    /// Run through the configured iteration budget.
    pub fn run(&mut self) -> Result<()> {
        while self.iter < self.cfg.iterations {
            self.step()?;
        }
        Ok(())
    }
}

/// Train against the dataset's own segmentation labels (for variants
/// that use them).
pub fn train(model: &mut Model, data: &Dataset, cfg: &TrainConfig) -> Result<Vec<LossRecord>> {
    let mut session = TrainSession::new(model.clone(), data.clone(), cfg.clone())?;
    session.run()?;
    let (trained, log) = session.into_parts();
    *model = trained;
    Ok(log)
}

/// Feature constraining: identical to [`train`] except the segmentation
/// targets come from `labels` instead of the dataset, keeping the
/// shared trunk compatible with the segmentation branch while the
/// detection losses adapt to the new data.
pub fn train_constrained(
    model: &mut Model,
    data: &Dataset,
    labels: &HallucinatedLabels,
    cfg: &TrainConfig,
) -> Result<Vec<LossRecord>> {
    let mut session = TrainSession::new_constrained(model.clone(), data.clone(), labels, cfg.clone())?;
    session.run()?;
    let (trained, log) = session.into_parts();
    *model = trained;
    Ok(log)
}

/// Per-pixel argmax over the class axis of a [1, K, H, W] score map,
/// ties toward the lower class index.
pub fn argmax_label_map(scores: &Tensor) -> LabelMap {
    let d = scores.dims();
    let (k, h, w) = (d[1], d[2], d[3]);
    let mut out = LabelMap::filled(w, h, 0);
    let data = scores.data();
    for y in 0..h {
        for x in 0..w {
            let mut best = f64::NEG_INFINITY;
            let mut best_c = 0usize;
            for c in 0..k {
                let v = data[(c * h + y) * w + x];
                if v > best {
                    best = v;
                    best_c = c;
                }
            }
            out.set(x, y, best_c as u8);
        }
    }
    out
}

/// Run the segmentation branch over every image and take the per-pixel
/// argmax as a label map.
pub fn hallucinate_labels(model: &Model, images: &[Tensor]) -> Result<HallucinatedLabels> {
    if !model.spec().variant.has_seg_branch() {
        return Err(Error::Capability(
            "cannot hallucinate labels: baseline variant has no segmentation stage".into(),
        ));
    }
    let mut maps = Vec::with_capacity(images.len());
    for image in images {
        let batch;
        let img = if image.dims().len() == 3 {
            let d = image.dims();
            batch = image.reshaped(&[1, 3, d[1], d[2]])?;
            &batch
        } else {
            image
        };
        let mut g = Graph::new();
        let feats = model.features(&mut g, img)?;
        let scores = model.seg_scores(&mut g, &feats)?;
        maps.push(argmax_label_map(g.value(scores)));
    }
    Ok(HallucinatedLabels {
        maps,
        source: format!("{:016x}", model.weight_fingerprint()),
    })
}

/// Convenience wrapper over a dataset's images.
pub fn hallucinate_dataset(model: &Model, data: &Dataset) -> Result<HallucinatedLabels> {
    let images: Vec<Tensor> = data.samples.iter().map(|s| s.image.clone()).collect();
    hallucinate_labels(model, &images)
}
