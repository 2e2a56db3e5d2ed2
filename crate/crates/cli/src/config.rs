//! Run configuration: a closed `section.key = value` schema with file
//! parsing and flag overrides.

use std::fs;
use std::path::Path;

use stuffnet_core::data::{SceneGenSpec, SegRegime};
use stuffnet_core::model::{ModelSpec, Variant};
use stuffnet_core::train::TrainConfig;

pub struct EvalConfig {
    pub iou_thresh: f64,
    pub small_area: f64,
    pub medium_area: f64,
    pub score_floor: f64,
    pub nms_iou: f64,
    pub max_dets: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            iou_thresh: 0.5,
            small_area: 32.0 * 32.0,
            medium_area: 96.0 * 96.0,
            score_floor: 0.05,
            nms_iou: 0.3,
            max_dets: 100,
        }
    }
}

pub struct RunConfig {
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub data: SceneGenSpec,
    pub eval: EvalConfig,
    pub write_seg: bool,
    pub render_score_thresh: f64,
    pub deterministic: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelSpec::desk(Variant::Fused),
            train: TrainConfig::desk(),
            data: SceneGenSpec::desk(500, 0.9, 11),
            eval: EvalConfig::default(),
            write_seg: true,
            render_score_thresh: 0.5,
            deterministic: true,
        }
    }
}

/// Configuration errors carry the offending key so the exit-2 message
/// names the field.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "config error: {}", self.0)
    }
}

type CResult<T> = Result<T, ConfigError>;

fn bad(key: &str, why: impl std::fmt::Display) -> ConfigError {
    ConfigError(format!("{key}: {why}"))
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> CResult<T> {
    v.trim()
        .parse::<T>()
        .map_err(|_| bad(key, format!("cannot parse {v:?}")))
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str, n: Option<usize>) -> CResult<Vec<T>> {
    let items: CResult<Vec<T>> = v
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<T>()
                .map_err(|_| bad(key, format!("cannot parse list {v:?}")))
        })
        .collect();
    let items = items?;
    if let Some(n) = n {
        if items.len() != n {
            return Err(bad(key, format!("expected {n} comma-separated values")));
        }
    }
    Ok(items)
}

fn parse_pair(key: &str, v: &str) -> CResult<(usize, usize)> {
    let xs: Vec<usize> = parse_list(key, v, Some(2))?;
    Ok((xs[0], xs[1]))
}

fn parse_bool(key: &str, v: &str) -> CResult<bool> {
    match v.trim() {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        other => Err(bad(key, format!("expected true/false, got {other:?}"))),
    }
}

impl RunConfig {
    /// Apply one `section.key = value` assignment. Unknown keys are
    /// errors: the schema is closed.
    pub fn apply(&mut self, key: &str, value: &str) -> CResult<()> {
        let v = value.trim();
        match key {
            "model.variant" => {
                self.model.variant = Variant::parse(v).map_err(|e| bad(key, e))?;
            }
            "model.stage_widths" => {
                let xs: Vec<usize> = parse_list(key, v, Some(4))?;
                self.model.stage_widths = [xs[0], xs[1], xs[2], xs[3]];
            }
            "model.det_subsample" => self.model.det_subsample = parse_num(key, v)?,
            "model.classes" => self.model.num_classes = parse_num(key, v)?,
            "model.seg_classes" => self.model.num_seg_classes = parse_num(key, v)?,
            "model.roi_grid" => self.model.roi_grid = parse_num(key, v)?,
            "model.rpn_channels" => self.model.rpn_channels = parse_num(key, v)?,
            "model.fc_width" => self.model.fc_width = parse_num(key, v)?,
            "model.seg_hidden" => self.model.seg_hidden = parse_num(key, v)?,
            "model.anchor_scales" => self.model.anchor_scales = parse_list(key, v, None)?,
            "model.anchor_ratios" => self.model.anchor_ratios = parse_list(key, v, None)?,

            "train.iterations" => self.train.iterations = parse_num(key, v)?,
            "train.base_lr" => self.train.base_lr = parse_num(key, v)?,
            "train.lr_step" => self.train.lr_step = parse_num(key, v)?,
            "train.lr_factor" => self.train.lr_factor = parse_num(key, v)?,
            "train.momentum" => self.train.momentum = parse_num(key, v)?,
            "train.weight_decay" => self.train.weight_decay = parse_num(key, v)?,
            "train.rpn_batch" => self.train.rpn.batch = parse_num(key, v)?,
            "train.head_batch" => self.train.head.batch = parse_num(key, v)?,
            "train.seed" => self.train.seed = parse_num(key, v)?,
            "train.loss_weights" => {
                let xs: Vec<f64> = parse_list(key, v, Some(5))?;
                if xs.iter().any(|&w| w < 0.0) {
                    return Err(bad(key, "loss weights must be non-negative"));
                }
                self.train.loss_weights.rpn_cls = xs[0];
                self.train.loss_weights.rpn_reg = xs[1];
                self.train.loss_weights.head_cls = xs[2];
                self.train.loss_weights.head_reg = xs[3];
                self.train.loss_weights.seg = xs[4];
            }

            "proposals.nms_iou" => self.train.proposals.nms_iou = parse_num(key, v)?,
            "proposals.pre_nms_top" => self.train.proposals.pre_nms_top = parse_num(key, v)?,
            "proposals.post_nms_top" => self.train.proposals.post_nms_top = parse_num(key, v)?,
            "proposals.min_size" => self.train.proposals.min_size = parse_num(key, v)?,

            "data.image_size" => self.data.image_size = parse_num(key, v)?,
            "data.count" => self.data.count = parse_num(key, v)?,
            "data.rho" => {
                let r: f64 = parse_num(key, v)?;
                if !(0.0..=1.0).contains(&r) {
                    return Err(bad(key, format!("rho must be in [0, 1], got {r}")));
                }
                self.data.rho = r;
            }
            "data.seed" => self.data.seed = parse_num(key, v)?,
            "data.min_objects" => self.data.min_objects = parse_num(key, v)?,
            "data.max_objects" => self.data.max_objects = parse_num(key, v)?,
            "data.small_fraction" => {
                let f: f64 = parse_num(key, v)?;
                if !(0.0..=1.0).contains(&f) {
                    return Err(bad(key, "small_fraction must be in [0, 1]"));
                }
                self.data.small_fraction = f;
            }
            "data.small_side" => self.data.small_side = parse_pair(key, v)?,
            "data.medium_side" => self.data.medium_side = parse_pair(key, v)?,
            "data.bands" => {
                let (lo, hi) = parse_pair(key, v)?;
                self.data.bands_min = lo;
                self.data.bands_max = hi;
            }
            "data.regime" => {
                self.data.regime = match v {
                    "stuff10" => SegRegime::Stuff10,
                    "full30" => SegRegime::Full30,
                    other => return Err(bad(key, format!("expected stuff10|full30, got {other:?}"))),
                };
            }
            "data.write_seg" => self.write_seg = parse_bool(key, v)?,

            "eval.iou_thresh" => self.eval.iou_thresh = parse_num(key, v)?,
            "eval.small_area" => self.eval.small_area = parse_num(key, v)?,
            "eval.medium_area" => self.eval.medium_area = parse_num(key, v)?,
            "eval.score_floor" => self.eval.score_floor = parse_num(key, v)?,
            "eval.nms_iou" => self.eval.nms_iou = parse_num(key, v)?,
            "eval.max_dets" => self.eval.max_dets = parse_num(key, v)?,

            "render.score_thresh" => self.render_score_thresh = parse_num(key, v)?,

            other => return Err(ConfigError(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Parse the `section.key = value` file format with `#` comments.
    pub fn apply_file(&mut self, path: &Path) -> CResult<()> {
        let text = fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read {}: {e}", path.display())))?;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                ConfigError(format!(
                    "{}:{}: expected key = value, got {line:?}",
                    path.display(),
                    lineno + 1
                ))
            })?;
            self.apply(k.trim(), v)?;
        }
        Ok(())
    }

    /// Apply a `--set key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> CResult<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| ConfigError(format!("--set expects key=value, got {assignment:?}")))?;
        self.apply(k.trim(), v)
    }

    /// Consistency checks across sections.
    pub fn validate(&self) -> CResult<()> {
        self.model
            .validate()
            .map_err(|e| ConfigError(format!("model: {e}")))?;
        self.data
            .validate()
            .map_err(|e| ConfigError(format!("data: {e}")))?;
        if self.model.num_classes < self.data.object_classes.len() + 1 {
            return Err(ConfigError(format!(
                "model.classes = {} cannot hold {} object classes plus background",
                self.model.num_classes,
                self.data.object_classes.len()
            )));
        }
        Ok(())
    }

    pub fn object_class_names(&self) -> Vec<String> {
        self.data
            .object_classes
            .iter()
            .map(|c| c.name.clone())
            .collect()
    }
}
