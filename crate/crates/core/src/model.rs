//! Model assembly: a shared convolutional trunk that forks into a
//! detection branch (subsample 8) and a segmentation branch (subsample
//! 4), the RPN, the fused ROI classification head, and checkpoint
//! serialization.
//!
//! Three variants share the code path:
//! * `baseline`   - detection branch only.
//! * `multitask`  - adds the segmentation branch and its loss; the
//!   detection head still sees only detection features.
//! * `fused`      - additionally ROI-pools the segmentation feature map
//!   (over doubled regions, matching its doubled resolution) and adds it
//!   elementwise to the detection ROI features before the fc layers.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use crate::boxgeom::{self, AnchorGrid, BBox, Detection};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::layers::{self, ConvParams, PoolParams};
use crate::tensor::{xavier_init, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SNCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Baseline,
    Multitask,
    Fused,
}

impl Variant {
    pub fn has_seg_branch(&self) -> bool {
        !matches!(self, Variant::Baseline)
    }

    pub fn fuses_roi_features(&self) -> bool {
        matches!(self, Variant::Fused)
    }

    pub fn parse(s: &str) -> Result<Variant> {
        match s {
            "baseline" => Ok(Variant::Baseline),
            "multitask" => Ok(Variant::Multitask),
            "fused" => Ok(Variant::Fused),
            other => Err(Error::invalid(format!(
                "unknown variant {other:?}, expected baseline|multitask|fused"
            ))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Baseline => "baseline",
            Variant::Multitask => "multitask",
            Variant::Fused => "fused",
        })
    }
}

/// Declarative network configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub variant: Variant,
    /// Trunk channel widths: stages 1-3 are shared, stage 4 is the
    /// per-branch conv stage.
    pub stage_widths: [usize; 4],
    /// Pixels per detection-feature cell. The segmentation branch runs
    /// at half this subsampling.
    pub det_subsample: usize,
    /// Object classes including background (index 0).
    pub num_classes: usize,
    /// Segmentation classes.
    pub num_seg_classes: usize,
    /// ROI pooling grid side.
    pub roi_grid: usize,
    pub rpn_channels: usize,
    pub fc_width: usize,
    pub seg_hidden: usize,
    pub anchor_scales: Vec<f64>,
    pub anchor_ratios: Vec<f64>,
}

impl ModelSpec {
    pub fn desk(variant: Variant) -> ModelSpec {
        ModelSpec {
            variant,
            stage_widths: [8, 16, 24, 24],
            det_subsample: 8,
            num_classes: 6,
            num_seg_classes: 10,
            roi_grid: 7,
            rpn_channels: 24,
            fc_width: 64,
            seg_hidden: 24,
            anchor_scales: vec![8.0, 16.0, 32.0],
            anchor_ratios: vec![0.5, 1.0, 2.0],
        }
    }

    /// Tiny configuration for gradient checks.
    pub fn mini(variant: Variant) -> ModelSpec {
        ModelSpec {
            variant,
            stage_widths: [4, 4, 6, 6],
            det_subsample: 8,
            num_classes: 3,
            num_seg_classes: 10,
            roi_grid: 3,
            rpn_channels: 6,
            fc_width: 8,
            seg_hidden: 6,
            anchor_scales: vec![8.0, 16.0],
            anchor_ratios: vec![1.0],
        }
    }

    pub fn seg_subsample(&self) -> usize {
        self.det_subsample / 2
    }

    pub fn anchor_count_per_cell(&self) -> usize {
        self.anchor_scales.len() * self.anchor_ratios.len()
    }

    pub fn anchor_grid(&self) -> Result<AnchorGrid> {
        AnchorGrid::new(
            self.det_subsample,
            self.anchor_scales.clone(),
            self.anchor_ratios.clone(),
        )
    }

    pub fn validate(&self) -> Result<()> {
        // the 4-stage trunk realizes exactly three 2x subsamplings
        if self.det_subsample != 8 {
            return Err(Error::invalid(format!(
                "det_subsample must be 8 for the 4-stage trunk, got {}",
                self.det_subsample
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::invalid("need at least background + one object class"));
        }
        if self.num_seg_classes < 2 {
            return Err(Error::invalid("need at least two segmentation classes"));
        }
        if self.num_seg_classes > 256 {
            return Err(Error::invalid("segmentation classes must fit in a byte"));
        }
        if self.roi_grid == 0 {
            return Err(Error::invalid("roi grid must be positive"));
        }
        if self.stage_widths.iter().any(|&w| w == 0)
            || self.rpn_channels == 0
            || self.fc_width == 0
            || self.seg_hidden == 0
        {
            return Err(Error::invalid("channel widths must be positive"));
        }
        if self.anchor_scales.is_empty()
            || self.anchor_ratios.is_empty()
            || self.anchor_scales.iter().any(|&s| s <= 0.0)
            || self.anchor_ratios.iter().any(|&r| r <= 0.0)
        {
            return Err(Error::invalid("anchor scales and ratios must be positive"));
        }
        Ok(())
    }

    /// Expected parameter tensors: name -> (dims, fan_in, fan_out).
    pub fn param_shapes(&self) -> BTreeMap<String, (Vec<usize>, usize, usize)> {
        let [w1, w2, w3, w4] = self.stage_widths;
        let mut m = BTreeMap::new();
        let mut conv = |name: &str, out_c: usize, in_c: usize, k: usize| {
            m.insert(
                format!("{name}.weight"),
                (vec![out_c, in_c, k, k], in_c * k * k, out_c * k * k),
            );
            m.insert(
                format!("{name}.bias"),
                (vec![out_c], in_c * k * k, out_c * k * k),
            );
        };
        conv("trunk.stage1.conv1", w1, 3, 3);
        conv("trunk.stage1.conv2", w1, w1, 3);
        conv("trunk.stage2.conv1", w2, w1, 3);
        conv("trunk.stage2.conv2", w2, w2, 3);
        conv("trunk.stage3.conv1", w3, w2, 3);
        conv("trunk.stage3.conv2", w3, w3, 3);
        conv("det.conv1", w4, w3, 3);
        conv("det.conv2", w4, w4, 3);
        let k = self.anchor_count_per_cell();
        conv("rpn.conv", self.rpn_channels, w4, 3);
        conv("rpn.cls", 2 * k, self.rpn_channels, 1);
        conv("rpn.reg", 4 * k, self.rpn_channels, 1);
        if self.variant.has_seg_branch() {
            conv("seg.conv1", w4, w3, 3);
            conv("seg.conv2", w4, w4, 3);
            conv("seg.fc6", self.seg_hidden, w4, 3);
            conv("seg.score", self.num_seg_classes, self.seg_hidden, 1);
        }
        let pooled = w4 * self.roi_grid * self.roi_grid;
        let mut fc = |name: &str, d: usize, k: usize| {
            m.insert(format!("{name}.weight"), (vec![d, k], d, k));
            m.insert(format!("{name}.bias"), (vec![k], d, k));
        };
        fc("head.fc6", pooled, self.fc_width);
        fc("head.fc7", self.fc_width, self.fc_width);
        fc("head.cls", self.fc_width, self.num_classes);
        fc("head.bbox", self.fc_width, 4 * self.num_classes);
        m
    }

    /// Canonical key=value text embedded in checkpoints.
    pub fn to_canonical_text(&self) -> String {
        let join_f = |xs: &[f64]| {
            xs.iter()
                .map(|v| format!("{v:?}"))
                .collect::<Vec<_>>()
                .join(",")
        };
        format!(
            "variant={}\nstage_widths={}\ndet_subsample={}\nnum_classes={}\nnum_seg_classes={}\nroi_grid={}\nrpn_channels={}\nfc_width={}\nseg_hidden={}\nanchor_scales={}\nanchor_ratios={}\n",
            self.variant,
            self.stage_widths
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(","),
            self.det_subsample,
            self.num_classes,
            self.num_seg_classes,
            self.roi_grid,
            self.rpn_channels,
            self.fc_width,
            self.seg_hidden,
            join_f(&self.anchor_scales),
            join_f(&self.anchor_ratios),
        )
    }

    pub fn from_canonical_text(text: &str) -> Result<ModelSpec> {
        let mut map = BTreeMap::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("bad spec line {line:?}")))?;
            map.insert(k.to_string(), v.to_string());
        }
        let get = |k: &str| {
            map.get(k)
                .ok_or_else(|| Error::invalid(format!("spec text missing key {k:?}")))
        };
        let usize_of = |k: &str| -> Result<usize> {
            get(k)?
                .parse::<usize>()
                .map_err(|_| Error::invalid(format!("bad integer for {k:?}")))
        };
        let floats_of = |k: &str| -> Result<Vec<f64>> {
            get(k)?
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::invalid(format!("bad float list for {k:?}")))
                })
                .collect()
        };
        let widths: Vec<usize> = get("stage_widths")?
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::invalid("bad stage_widths"))
            })
            .collect::<Result<_>>()?;
        if widths.len() != 4 {
            return Err(Error::invalid("stage_widths must have 4 entries"));
        }
        let spec = ModelSpec {
            variant: Variant::parse(get("variant")?)?,
            stage_widths: [widths[0], widths[1], widths[2], widths[3]],
            det_subsample: usize_of("det_subsample")?,
            num_classes: usize_of("num_classes")?,
            num_seg_classes: usize_of("num_seg_classes")?,
            roi_grid: usize_of("roi_grid")?,
            rpn_channels: usize_of("rpn_channels")?,
            fc_width: usize_of("fc_width")?,
            seg_hidden: usize_of("seg_hidden")?,
            anchor_scales: floats_of("anchor_scales")?,
            anchor_ratios: floats_of("anchor_ratios")?,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// A built network: spec plus named weight tensors.
#[derive(Clone, Debug)]
pub struct Model {
    spec: ModelSpec,
    params: BTreeMap<String, Tensor>,
}

/// Forward feature nodes up to the branch fork outputs.
pub struct Features {
    pub det: NodeId,
    pub seg: Option<NodeId>,
    pub image_w: usize,
    pub image_h: usize,
}

/// RPN graph nodes plus the anchor layout they score.
pub struct RpnNodes {
    /// [A, 2] objectness logits (background, foreground).
    pub scores: NodeId,
    /// [A, 4] regression deltas.
    pub deltas: NodeId,
    pub anchors: Vec<BBox>,
}

/// Detection head graph nodes.
pub struct HeadNodes {
    /// [M, C] class logits.
    pub cls: NodeId,
    /// [M, 4C] per-class box deltas.
    pub bbox: NodeId,
}

/// Proposal generation settings.
#[derive(Clone, Copy, Debug)]
pub struct ProposalConfig {
    pub nms_iou: f64,
    pub pre_nms_top: usize,
    pub post_nms_top: usize,
    pub min_size: f64,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        ProposalConfig {
            nms_iou: 0.7,
            pre_nms_top: 2000,
            post_nms_top: 300,
            min_size: 2.0,
        }
    }
}

/// Inference postprocessing settings.
#[derive(Clone, Copy, Debug)]
pub struct PostprocessConfig {
    pub score_floor: f64,
    pub nms_iou: f64,
    pub max_dets: usize,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        PostprocessConfig {
            score_floor: 0.05,
            nms_iou: 0.3,
            max_dets: 100,
        }
    }
}

/// Raw head outputs for a set of regions.
pub struct DetectionOutput {
    /// [R, C] softmaxed class probabilities (each row sums to 1).
    pub class_probs: Tensor,
    /// [R, 4C] per-class box deltas.
    pub box_deltas: Tensor,
    /// The regions the scores refer to, in image coordinates.
    pub rois: Vec<BBox>,
    /// [1, K_seg, H, W] segmentation scores at input resolution.
    pub seg_map: Option<Tensor>,
}

impl Model {
    /// Build with Xavier-initialized weights, one derived stream per
    /// parameter so widths can change without reshuffling the rest.
    pub fn build(spec: ModelSpec, seed: u64) -> Result<Model> {
        spec.validate()?;
        let mut params = BTreeMap::new();
        for (name, (dims, fan_in, fan_out)) in spec.param_shapes() {
            let name_seed = {
                let mut h: u64 = 0xcbf29ce484222325;
                for b in name.as_bytes() {
                    h ^= *b as u64;
                    h = h.wrapping_mul(0x100000001b3);
                }
                seed.wrapping_add(h)
            };
            params.insert(name, xavier_init(fan_in, fan_out, &dims, name_seed)?);
        }
        Ok(Model { spec, params })
    }

    /// Assemble from explicit tensors, validating names and shapes
    /// against what the spec requires.
    pub fn assemble(spec: ModelSpec, tensors: BTreeMap<String, Tensor>) -> Result<Model> {
        spec.validate()?;
        let expected = spec.param_shapes();
        let missing: Vec<&str> = expected
            .keys()
            .filter(|k| !tensors.contains_key(*k))
            .map(|k| k.as_str())
            .collect();
        let unexpected: Vec<&str> = tensors
            .keys()
            .filter(|k| !expected.contains_key(*k))
            .map(|k| k.as_str())
            .collect();
        if !missing.is_empty() || !unexpected.is_empty() {
            return Err(Error::CheckpointMismatch {
                missing: missing.join(", "),
                unexpected: unexpected.join(", "),
            });
        }
        for (name, (dims, _, _)) in &expected {
            let got = tensors[name].dims();
            if got != dims.as_slice() {
                return Err(Error::shape(format!(
                    "tensor {name} has dims {got:?}, spec requires {dims:?}"
                )));
            }
        }
        Ok(Model {
            spec,
            params: tensors,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.params
    }

    pub fn into_params(self) -> BTreeMap<String, Tensor> {
        self.params
    }

    /// FNV-1a over the f32-serialized weights, usable as a provenance id.
    pub fn weight_fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |b: u8| {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        };
        for (name, t) in &self.params {
            for b in name.as_bytes() {
                eat(*b);
            }
            for v in t.data() {
                for b in (*v as f32).to_le_bytes() {
                    eat(b);
                }
            }
        }
        h
    }

    fn param_node(&self, g: &mut Graph, name: &str) -> NodeId {
        let t = self
            .params
            .get(name)
            .unwrap_or_else(|| panic!("model is missing parameter {name}"))
            .clone();
        g.param(name, t)
    }

    fn conv_block(&self, g: &mut Graph, x: NodeId, name: &str, p: ConvParams) -> Result<NodeId> {
        let w = self.param_node(g, &format!("{name}.weight"));
        let b = self.param_node(g, &format!("{name}.bias"));
        layers::conv2d(g, x, w, b, p)
    }

    fn conv_relu(&self, g: &mut Graph, x: NodeId, name: &str, p: ConvParams) -> Result<NodeId> {
        let c = self.conv_block(g, x, name, p)?;
        layers::relu(g, c)
    }

    fn fc_block(&self, g: &mut Graph, x: NodeId, name: &str) -> Result<NodeId> {
        let w = self.param_node(g, &format!("{name}.weight"));
        let b = self.param_node(g, &format!("{name}.bias"));
        layers::fully_connected(g, x, w, b)
    }

    /// Shared trunk, then the stride-2 / stride-1 pooling fork into the
    /// detection and segmentation feature maps.
    pub fn features(&self, g: &mut Graph, image: &Tensor) -> Result<Features> {
        let dims = image.dims();
        if dims.len() != 4 || dims[0] != 1 || dims[1] != 3 {
            return Err(Error::shape(format!(
                "expected [1,3,H,W] image, got {dims:?}"
            )));
        }
        let (h, w) = (dims[2], dims[3]);
        let s = self.spec.det_subsample;
        if h % s != 0 || w % s != 0 || h < s || w < s {
            return Err(Error::shape(format!(
                "image {h}x{w} must be a positive multiple of det_subsample {s}"
            )));
        }
        let p3 = ConvParams::new(1, 1, 1)?;
        let pool2 = PoolParams::new(2, 2, 0)?;

        // center the [0,1] raster; training from scratch wants zero-mean
        // inputs just like the mean-subtracted inputs of pretrained trunks
        let raw = g.leaf(image.clone());
        let mean = g.leaf(Tensor::filled(image.dims(), 0.5)?);
        let x = g.sub(raw, mean)?;
        let x = self.conv_relu(g, x, "trunk.stage1.conv1", p3)?;
        let x = self.conv_relu(g, x, "trunk.stage1.conv2", p3)?;
        let x = layers::maxpool2d(g, x, pool2)?;
        let x = self.conv_relu(g, x, "trunk.stage2.conv1", p3)?;
        let x = self.conv_relu(g, x, "trunk.stage2.conv2", p3)?;
        let x = layers::maxpool2d(g, x, pool2)?;
        let x = self.conv_relu(g, x, "trunk.stage3.conv1", p3)?;
        let shared = self.conv_relu(g, x, "trunk.stage3.conv2", p3)?;

        // detection branch: subsampling pool then two convs
        let d = layers::maxpool2d(g, shared, pool2)?;
        let d = self.conv_relu(g, d, "det.conv1", p3)?;
        let det = self.conv_relu(g, d, "det.conv2", p3)?;

        // segmentation branch: size-preserving pool then dilated convs
        let seg = if self.spec.variant.has_seg_branch() {
            let dil = ConvParams::new(1, 2, 2)?;
            let sgn = layers::maxpool2d(g, shared, PoolParams::preserving(3)?)?;
            let sgn = self.conv_relu(g, sgn, "seg.conv1", dil)?;
            Some(self.conv_relu(g, sgn, "seg.conv2", dil)?)
        } else {
            None
        };
        Ok(Features {
            det,
            seg,
            image_w: w,
            image_h: h,
        })
    }

    /// RPN: 3x3 hidden conv, then parallel 1x1 score/delta convs,
    /// rearranged anchor-major to align with `generate_anchors` order.
    pub fn rpn(&self, g: &mut Graph, feats: &Features) -> Result<RpnNodes> {
        let p3 = ConvParams::new(1, 1, 1)?;
        let p1 = ConvParams::unit();
        let hid = self.conv_relu(g, feats.det, "rpn.conv", p3)?;
        let cls = self.conv_block(g, hid, "rpn.cls", p1)?;
        let reg = self.conv_block(g, hid, "rpn.reg", p1)?;

        let d = g.value(cls).dims().to_vec();
        let (fh, fw) = (d[2], d[3]);
        let k = self.spec.anchor_count_per_cell();
        let scores = g.gather(cls, anchor_major_index(fh, fw, k, 2), &[fh * fw * k, 2])?;
        let deltas = g.gather(reg, anchor_major_index(fh, fw, k, 4), &[fh * fw * k, 4])?;
        let anchors = boxgeom::generate_anchors(&self.spec.anchor_grid()?, fh, fw);
        Ok(RpnNodes {
            scores,
            deltas,
            anchors,
        })
    }

    /// Decode RPN outputs into scored proposals: decode against anchors,
    /// clip, drop tiny boxes, keep the top pre-NMS scorers, then NMS.
    pub fn proposals(
        &self,
        g: &Graph,
        rpn: &RpnNodes,
        image_w: usize,
        image_h: usize,
        cfg: &ProposalConfig,
    ) -> Result<Vec<(BBox, f64)>> {
        let scores = g.value(rpn.scores);
        let deltas = g.value(rpn.deltas);
        let n = rpn.anchors.len();
        let sd = scores.data();
        let dd = deltas.data();

        let mut fg = Vec::with_capacity(n);
        let mut boxes = Vec::with_capacity(n);
        for i in 0..n {
            // softmax over (bg, fg) logits
            let (b, f) = (sd[2 * i], sd[2 * i + 1]);
            let m = b.max(f);
            let eb = (b - m).exp();
            let ef = (f - m).exp();
            fg.push(ef / (eb + ef));
            // clamp log-size deltas so exp stays finite under random weights
            let delta = boxgeom::BoxDelta {
                tx: dd[4 * i],
                ty: dd[4 * i + 1],
                tw: dd[4 * i + 2].min(4.0),
                th: dd[4 * i + 3].min(4.0),
            };
            boxes.push(boxgeom::decode(&rpn.anchors[i], &delta)?);
        }

        let kept =
            boxgeom::clip_and_filter_proposals(&boxes, image_w as f64, image_h as f64, cfg.min_size);
        let mut cand: Vec<(BBox, f64)> = kept.into_iter().map(|(i, b)| (b, fg[i])).collect();
        cand.sort_by(|a, b| b.1.total_cmp(&a.1));
        cand.truncate(cfg.pre_nms_top);

        let cboxes: Vec<BBox> = cand.iter().map(|c| c.0).collect();
        let cscores: Vec<f64> = cand.iter().map(|c| c.1).collect();
        let keep = boxgeom::nms(&cboxes, &cscores, cfg.nms_iou, cfg.post_nms_top);
        Ok(keep.into_iter().map(|i| cand[i]).collect())
    }

    /// ROI pooling (fused when the variant calls for it) and the fc
    /// classification head.
    pub fn detection_head(
        &self,
        g: &mut Graph,
        feats: &Features,
        rois: &[BBox],
    ) -> Result<HeadNodes> {
        if rois.is_empty() {
            return Err(Error::invalid("detection head needs at least one roi"));
        }
        let grid = self.spec.roi_grid;
        let det_scale = 1.0 / self.spec.det_subsample as f64;
        let det_rois: Vec<[f64; 4]> = rois
            .iter()
            .map(|r| {
                let b = r.scaled(det_scale);
                [b.x0, b.y0, b.x1, b.y1]
            })
            .collect();
        let pooled_det = layers::roi_maxpool(g, feats.det, &det_rois, grid)?;
        let pooled = if self.spec.variant.fuses_roi_features() {
            let seg = feats
                .seg
                .expect("fused variant always builds the segmentation branch");
            // the segmentation map has twice the resolution, so the same
            // image region doubles in feature coordinates
            let seg_rois: Vec<[f64; 4]> = det_rois.iter().map(|r| r.map(|v| v * 2.0)).collect();
            let pooled_seg = layers::roi_maxpool(g, seg, &seg_rois, grid)?;
            g.add(pooled_det, pooled_seg)?
        } else {
            pooled_det
        };
        let w4 = self.spec.stage_widths[3];
        let flat = g.reshape(pooled, &[rois.len(), w4 * grid * grid])?;
        let f6 = self.fc_block(g, flat, "head.fc6")?;
        let f6 = layers::relu(g, f6)?;
        let f7 = self.fc_block(g, f6, "head.fc7")?;
        let f7 = layers::relu(g, f7)?;
        let cls = self.fc_block(g, f7, "head.cls")?;
        let bbox = self.fc_block(g, f7, "head.bbox")?;
        Ok(HeadNodes { cls, bbox })
    }

    /// Segmentation scores at input resolution: dilated hidden conv, 1x1
    /// classifier, bilinear upsample by the segmentation subsample.
    pub fn seg_scores(&self, g: &mut Graph, feats: &Features) -> Result<NodeId> {
        let seg = feats.seg.ok_or_else(|| {
            Error::Capability("baseline variant has no segmentation stage".into())
        })?;
        let hid = self.conv_relu(g, seg, "seg.fc6", ConvParams::new(1, 2, 2)?)?;
        let score = self.conv_block(g, hid, "seg.score", ConvParams::unit())?;
        layers::bilinear_upsample(g, score, self.spec.seg_subsample())
    }

    // -- inference ----------------------------------------------------------

    /// Run the RPN on one image and return scores, deltas, and proposals.
    pub fn forward_rpn(
        &self,
        image: &Tensor,
        cfg: &ProposalConfig,
    ) -> Result<(Tensor, Tensor, Vec<(BBox, f64)>)> {
        let mut g = Graph::new();
        let feats = self.features(&mut g, image)?;
        let rpn = self.rpn(&mut g, &feats)?;
        let props = self.proposals(&g, &rpn, feats.image_w, feats.image_h, cfg)?;
        Ok((
            g.value(rpn.scores).clone(),
            g.value(rpn.deltas).clone(),
            props,
        ))
    }

    /// Score the given regions (image coordinates) and, when the variant
    /// has one, produce the dense segmentation map.
    pub fn forward_heads(&self, image: &Tensor, rois: &[BBox]) -> Result<DetectionOutput> {
        let mut g = Graph::new();
        let feats = self.features(&mut g, image)?;
        let head = self.detection_head(&mut g, &feats, rois)?;
        let seg_map = if self.spec.variant.has_seg_branch() {
            let s = self.seg_scores(&mut g, &feats)?;
            Some(g.value(s).clone())
        } else {
            None
        };
        Ok(DetectionOutput {
            class_probs: layers::softmax_rows(g.value(head.cls))?,
            box_deltas: g.value(head.bbox).clone(),
            rois: rois.to_vec(),
            seg_map,
        })
    }

    /// Full detection pipeline: proposals, head scoring, per-class box
    /// decoding, score floor, per-class NMS.
    pub fn detect(
        &self,
        image: &Tensor,
        prop_cfg: &ProposalConfig,
        post_cfg: &PostprocessConfig,
    ) -> Result<(Vec<Detection>, Option<Tensor>)> {
        let mut g = Graph::new();
        let feats = self.features(&mut g, image)?;
        let rpn = self.rpn(&mut g, &feats)?;
        let props = self.proposals(&g, &rpn, feats.image_w, feats.image_h, prop_cfg)?;
        let seg_map = if self.spec.variant.has_seg_branch() {
            let s = self.seg_scores(&mut g, &feats)?;
            Some(g.value(s).clone())
        } else {
            None
        };
        if props.is_empty() {
            return Ok((Vec::new(), seg_map));
        }
        let rois: Vec<BBox> = props.iter().map(|p| p.0).collect();
        let head = self.detection_head(&mut g, &feats, &rois)?;
        let probs = layers::softmax_rows(g.value(head.cls))?;
        let deltas = g.value(head.bbox);

        let c = self.spec.num_classes;
        let (iw, ih) = (feats.image_w as f64, feats.image_h as f64);
        let mut dets: Vec<Detection> = Vec::new();
        // background deltas (class 0) are never applied
        for class in 1..c {
            let mut cls_boxes = Vec::new();
            let mut cls_scores = Vec::new();
            for (i, roi) in rois.iter().enumerate() {
                let score = probs.data()[i * c + class];
                if score < post_cfg.score_floor {
                    continue;
                }
                let d = deltas.data();
                let o = i * 4 * c + 4 * class;
                let delta = boxgeom::BoxDelta {
                    tx: d[o],
                    ty: d[o + 1],
                    tw: d[o + 2].min(4.0),
                    th: d[o + 3].min(4.0),
                };
                let decoded = boxgeom::decode(roi, &delta)?.clamped(iw, ih);
                if decoded.is_valid() {
                    cls_boxes.push(decoded);
                    cls_scores.push(score);
                }
            }
            for i in boxgeom::nms(&cls_boxes, &cls_scores, post_cfg.nms_iou, post_cfg.max_dets) {
                dets.push(Detection {
                    rect: cls_boxes[i],
                    class,
                    score: cls_scores[i],
                });
            }
        }
        dets.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.class.cmp(&b.class)));
        dets.truncate(post_cfg.max_dets);
        Ok((dets, seg_map))
    }
}

/// Gather index mapping [1, k*j, H, W] conv output to anchor-major rows
/// [(H*W*k), j]: row-major cells, anchors within a cell, j fastest.
fn anchor_major_index(fh: usize, fw: usize, k: usize, j: usize) -> Vec<usize> {
    let mut index = Vec::with_capacity(fh * fw * k * j);
    for y in 0..fh {
        for x in 0..fw {
            for a in 0..k {
                for c in 0..j {
                    index.push(((a * j + c) * fh + y) * fw + x);
                }
            }
        }
    }
    index
}

/// Pool the same region from the detection map and (doubled, matching
/// its doubled resolution) the segmentation map, and sum elementwise.
pub fn fuse_roi_features(
    det_feat: &Tensor,
    seg_feat: &Tensor,
    roi_on_det: [f64; 4],
    grid: usize,
) -> Result<Tensor> {
    let dd = det_feat.dims();
    let sd = seg_feat.dims();
    if dd.len() != 4 || sd.len() != 4 || sd[2] != 2 * dd[2] || sd[3] != 2 * dd[3] || sd[1] != dd[1]
    {
        return Err(Error::shape(format!(
            "fusion needs seg dims exactly 2x det dims with equal channels, got {sd:?} vs {dd:?}"
        )));
    }
    let pooled_det = layers::roi_maxpool_region(det_feat, roi_on_det, grid)?;
    let seg_roi = roi_on_det.map(|v| v * 2.0);
    let pooled_seg = layers::roi_maxpool_region(seg_feat, seg_roi, grid)?;
    let mut out = pooled_det;
    for (o, s) in out.data_mut().iter_mut().zip(pooled_seg.data()) {
        *o += s;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// checkpoint serialization

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::malformed(
                &self.path,
                self.pos,
                format!("truncated record: wanted {n} bytes"),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Serialize a model: spec text plus every named tensor as 32-bit
/// little-endian floats, names in sorted order.
pub fn encode_checkpoint(model: &Model) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    let spec_text = model.spec.to_canonical_text();
    put_u32(&mut out, spec_text.len() as u32);
    out.extend_from_slice(spec_text.as_bytes());
    put_u32(&mut out, model.params.len() as u32);
    for (name, t) in &model.params {
        put_u32(&mut out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.dims().len() as u32);
        for &d in t.dims() {
            put_u32(&mut out, d as u32);
        }
        for v in t.data() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8], path: &str) -> Result<Model> {
    let mut r = ByteReader {
        bytes,
        pos: 0,
        path: path.to_string(),
    };
    let magic = r.take(4)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::malformed(path, 0, "bad magic"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::malformed(
            path,
            4,
            format!("unsupported version {version}, expected {CHECKPOINT_VERSION}"),
        ));
    }
    let spec_len = r.u32()? as usize;
    let spec_text = std::str::from_utf8(r.take(spec_len)?)
        .map_err(|_| Error::malformed(path, r.pos, "spec text is not UTF-8"))?;
    let spec = ModelSpec::from_canonical_text(spec_text)?;
    let count = r.u32()? as usize;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::malformed(path, r.pos, "tensor name is not UTF-8"))?
            .to_string();
        let rank = r.u32()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32()? as usize);
        }
        let n: usize = dims.iter().product();
        let payload = r.take(n * 4)?;
        let data: Vec<f64> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        tensors.insert(name, Tensor::new(&dims, data)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::malformed(
            path,
            r.pos,
            "trailing bytes after last tensor",
        ));
    }
    Model::assemble(spec, tensors)
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(model)).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    decode_checkpoint(&bytes, &path.display().to_string())
}

/// Load a checkpoint and assemble it against a caller-supplied spec
/// instead of the embedded one (the tensors must satisfy the new spec).
pub fn load_checkpoint_as(path: &Path, spec: &ModelSpec) -> Result<Model> {
    let m = load_checkpoint(path)?;
    Model::assemble(spec.clone(), m.params)
}
