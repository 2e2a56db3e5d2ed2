//! Browser bindings for three interactive views: the synthetic scene
//! generator, the NMS geometry playground, and a live training session
//! rendered onto a canvas.

use wasm_bindgen::prelude::*;

use stuffnet_core::boxgeom::{nms, BBox};
use stuffnet_core::data::{generate_scene, Dataset, SceneGenSpec, SceneSample};
use stuffnet_core::model::{Model, ModelSpec, PostprocessConfig, ProposalConfig, Variant};
use stuffnet_core::render::{class_color, render_overlay};
use stuffnet_core::rng::Rng;
use stuffnet_core::train::{argmax_label_map, TrainConfig, TrainSession};

fn js_err(e: impl std::fmt::Display) -> JsValue {
    JsValue::from_str(&e.to_string())
}

fn rgb_to_rgba(rgb: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(rgb.len() / 3 * 4);
    for px in rgb.chunks_exact(3) {
        out.extend_from_slice(px);
        out.push(255);
    }
    out
}

/// Demo-sized generator settings: 48px scenes keep in-browser training
/// responsive.
fn demo_gen(count: usize, rho: f64, seed: u64) -> SceneGenSpec {
    let mut spec = SceneGenSpec::desk(count, rho, seed);
    spec.image_size = 48;
    spec.small_side = (8, 18);
    spec.medium_side = (24, 34);
    spec
}

fn demo_model(variant: Variant) -> ModelSpec {
    ModelSpec {
        stage_widths: [6, 12, 16, 16],
        rpn_channels: 16,
        fc_width: 48,
        seg_hidden: 16,
        ..ModelSpec::desk(variant)
    }
}

/// One generated scene with its ground truth, ready to draw.
#[wasm_bindgen]
pub struct ScenePreview {
    sample: SceneSample,
}

#[wasm_bindgen]
impl ScenePreview {
    /// Generate scene `index` of the stream `(seed, rho)` at the given
    /// square size (a multiple of 8, at least 32).
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, index: u32, rho: f64, size: u32) -> Result<ScenePreview, JsValue> {
        let mut spec = demo_gen(1, rho, seed as u64);
        spec.image_size = (size as usize).clamp(32, 128) / 8 * 8;
        if spec.image_size >= 64 {
            spec.small_side = (10, 26);
            spec.medium_side = (34, 46);
        }
        let sample = generate_scene(&spec, index as usize).map_err(js_err)?;
        Ok(ScenePreview { sample })
    }

    pub fn width(&self) -> u32 {
        self.sample.width() as u32
    }

    pub fn height(&self) -> u32 {
        self.sample.height() as u32
    }

    /// RGBA pixels of the scene.
    pub fn image_rgba(&self) -> Vec<u8> {
        rgb_to_rgba(&stuffnet_core::data::image_to_rgb8(&self.sample.image))
    }

    /// RGBA pixels of the ground-truth segmentation, palette colors.
    pub fn seg_rgba(&self) -> Vec<u8> {
        let seg = self.sample.seg.as_ref().expect("generated scenes carry labels");
        let mut out = Vec::with_capacity(seg.data.len() * 4);
        for &v in &seg.data {
            let c = class_color(v as usize);
            out.extend_from_slice(&c);
            out.push(255);
        }
        out
    }

    /// Ground-truth boxes as flat rows [class, x0, y0, x1, y1].
    pub fn boxes(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.sample.boxes.len() * 5);
        for b in &self.sample.boxes {
            out.extend_from_slice(&[
                b.class as f64,
                b.rect.x0,
                b.rect.y0,
                b.rect.x1,
                b.rect.y1,
            ]);
        }
        out
    }
}

/// Greedy NMS on a random scored box set. Returns flat rows
/// [x0, y0, x1, y1, score, kept] over a `extent` x `extent` canvas.
#[wasm_bindgen]
pub fn nms_playground(seed: u32, count: u32, iou_threshold: f64, extent: f64) -> Vec<f64> {
    let mut rng = Rng::stream(seed as u64, "nms-demo");
    let count = count.clamp(1, 200) as usize;
    let mut boxes = Vec::with_capacity(count);
    let mut scores = Vec::with_capacity(count);
    for _ in 0..count {
        let w = rng.uniform(extent * 0.1, extent * 0.45);
        let h = rng.uniform(extent * 0.1, extent * 0.45);
        let x0 = rng.uniform(0.0, extent - w);
        let y0 = rng.uniform(0.0, extent - h);
        boxes.push(BBox::new(x0, y0, x0 + w, y0 + h));
        scores.push(rng.unit());
    }
    let kept = nms(&boxes, &scores, iou_threshold, count);
    let mut out = Vec::with_capacity(count * 6);
    for (i, b) in boxes.iter().enumerate() {
        out.extend_from_slice(&[
            b.x0,
            b.y0,
            b.x1,
            b.y1,
            scores[i],
            if kept.contains(&i) { 1.0 } else { 0.0 },
        ]);
    }
    out
}

/// A live training run over a small synthetic dataset.
#[wasm_bindgen]
pub struct TrainerLab {
    session: TrainSession,
    test: Dataset,
}

#[wasm_bindgen]
impl TrainerLab {
    /// `variant` is baseline | multitask | fused.
    #[wasm_bindgen(constructor)]
    pub fn new(variant: &str, seed: u32, rho: f64, train_scenes: u32) -> Result<TrainerLab, JsValue> {
        let variant = Variant::parse(variant).map_err(js_err)?;
        let gen = demo_gen(train_scenes.clamp(4, 128) as usize, rho, seed as u64);
        let data = Dataset::generate(&gen).map_err(js_err)?;
        let test_gen = demo_gen(16, rho, seed as u64 ^ 0x5eed);
        let test = Dataset::generate(&test_gen).map_err(js_err)?;
        let model = Model::build(demo_model(variant), seed as u64).map_err(js_err)?;
        let cfg = TrainConfig {
            iterations: usize::MAX,
            lr_step: 2000,
            base_lr: 3e-3,
            seed: seed as u64,
            ..TrainConfig::desk()
        };
        let session = TrainSession::new(model, data, cfg).map_err(js_err)?;
        Ok(TrainerLab { session, test })
    }

    /// Run `n` training iterations; returns the mean total loss.
    pub fn step(&mut self, n: u32) -> Result<f64, JsValue> {
        let mut sum = 0.0;
        let n = n.max(1);
        for _ in 0..n {
            sum += self.session.step().map_err(js_err)?.total;
        }
        Ok(sum / n as f64)
    }

    pub fn iteration(&self) -> u32 {
        self.session.iteration() as u32
    }

    pub fn test_count(&self) -> u32 {
        self.test.len() as u32
    }

    pub fn image_size(&self) -> u32 {
        self.test.samples[0].width() as u32
    }

    /// Detection + segmentation overlay for one held-out scene, RGBA.
    pub fn detect_rgba(&self, test_index: u32, score_thresh: f64) -> Result<Vec<u8>, JsValue> {
        let sample = self
            .test
            .samples
            .get(test_index as usize)
            .ok_or_else(|| js_err("test index out of range"))?;
        let post = PostprocessConfig {
            score_floor: score_thresh.max(0.01),
            ..PostprocessConfig::default()
        };
        let (dets, seg_map) = self
            .session
            .model()
            .detect(&sample.batch_image(), &ProposalConfig::default(), &post)
            .map_err(js_err)?;
        let seg_labels = seg_map.as_ref().map(argmax_label_map);
        let (_, _, rgb) = render_overlay(&sample.image, &dets, seg_labels.as_ref(), score_thresh);
        Ok(rgb_to_rgba(&rgb))
    }

    /// Ground-truth boxes of a held-out scene, [class, x0, y0, x1, y1].
    pub fn test_boxes(&self, test_index: u32) -> Vec<f64> {
        match self.test.samples.get(test_index as usize) {
            None => Vec::new(),
            Some(s) => {
                let mut out = Vec::new();
                for b in &s.boxes {
                    out.extend_from_slice(&[
                        b.class as f64,
                        b.rect.x0,
                        b.rect.y0,
                        b.rect.x1,
                        b.rect.y1,
                    ]);
                }
                out
            }
        }
    }
}

/// Palette color of a class index as [r, g, b].
#[wasm_bindgen]
pub fn palette_color(index: u32) -> Vec<u8> {
    class_color(index as usize).to_vec()
}
