//! Synthetic objects-in-stuff-context scenes, the stuff class
//! vocabulary with its merge table, and dataset file I/O.
//!
//! A scene is a stack of colored stuff bands with a handful of filled
//! shapes placed on them. The context-coupling strength `rho` controls
//! how often an object's class is determined by the stuff band it sits
//! on (with class-agnostic appearance drawn from a shared pool) rather
//! than by its own class-specific shape and color. At high rho the
//! surrounding stuff is the only way to tell classes apart, which is
//! exactly the regime where segmentation-aware detection should win.
//!
//! On-disk layout: `images/NNNNNN.ppm` (P6), `seg/NNNNNN.pgm` (P5 with
//! class indices as gray values), `boxes/NNNNNN.txt` with lines
//! `class x0 y0 x1 y1`, `manifest.txt` (one id per line), `vocab.txt`
//! (one segmentation class name per line, index order).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::boxgeom::{BBox, GtBox};
use crate::error::{Error, Result};
use crate::pnm;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Canonical stuff classes, background first. Index order is fixed.
pub const STUFF_CLASSES: [&str; 10] = [
    "background",
    "wall",
    "floor",
    "water",
    "tree",
    "sky",
    "road",
    "ground",
    "building",
    "mountain",
];

/// Base colors for the canonical stuff classes, in vocab order.
pub const STUFF_COLORS: [[f64; 3]; 10] = [
    [0.08, 0.08, 0.08], // background
    [0.80, 0.78, 0.72], // wall
    [0.62, 0.54, 0.48], // floor
    [0.16, 0.32, 0.75], // water
    [0.13, 0.55, 0.13], // tree
    [0.53, 0.81, 0.92], // sky
    [0.42, 0.42, 0.45], // road
    [0.76, 0.64, 0.35], // ground
    [0.58, 0.44, 0.36], // building
    [0.50, 0.55, 0.58], // mountain
];

/// Ordered class names plus the merge table from raw annotation names
/// to canonical ones.
#[derive(Clone, Debug)]
pub struct StuffVocabulary {
    classes: Vec<String>,
    merges: BTreeMap<&'static str, &'static str>,
}

impl StuffVocabulary {
    pub fn canonical() -> StuffVocabulary {
        let merges = BTreeMap::from([
            ("sidewalk", "road"),
            ("runway", "road"),
            ("ceiling", "wall"),
            ("grass", "ground"),
            ("platform", "ground"),
            ("sand", "ground"),
            ("snow", "ground"),
        ]);
        StuffVocabulary {
            classes: STUFF_CLASSES.iter().map(|s| s.to_string()).collect(),
            merges,
        }
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == name)
    }

    /// Canonical name for a raw annotation name. Canonical names map to
    /// themselves; anything else must be in the merge table.
    pub fn merge_name<'a>(&'a self, raw: &'a str) -> Result<&'a str> {
        if self.classes.iter().any(|c| c == raw) {
            return Ok(raw);
        }
        self.merges
            .get(raw)
            .copied()
            .ok_or_else(|| Error::UnknownStuffClass(raw.to_string()))
    }
}

/// Dense per-pixel class indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub w: usize,
    pub h: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn filled(w: usize, h: usize, v: u8) -> LabelMap {
        LabelMap {
            w,
            h,
            data: vec![v; w * h],
        }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.data[y * self.w + x] = v;
    }
}

/// Re-index a raw label map onto the canonical vocabulary via the merge
/// table. `raw_names[i]` is the name of raw index i.
pub fn merge_stuff_classes(
    map: &LabelMap,
    raw_names: &[String],
    vocab: &StuffVocabulary,
) -> Result<LabelMap> {
    let mut lut = Vec::with_capacity(raw_names.len());
    for name in raw_names {
        let canon = vocab.merge_name(name)?;
        let idx = vocab
            .index_of(canon)
            .expect("merge targets are canonical by construction");
        lut.push(idx as u8);
    }
    let mut out = map.clone();
    for v in &mut out.data {
        let raw = *v as usize;
        if raw >= lut.len() {
            return Err(Error::invalid(format!(
                "raw label {raw} has no name (only {} known)",
                lut.len()
            )));
        }
        *v = lut[raw];
    }
    Ok(out)
}

/// One training example.
#[derive(Clone, Debug)]
pub struct SceneSample {
    /// [3, H, W] values in [0, 1].
    pub image: Tensor,
    pub boxes: Vec<GtBox>,
    /// Dense segmentation labels; absent for datasets without stuff
    /// annotations.
    pub seg: Option<LabelMap>,
}

impl SceneSample {
    pub fn width(&self) -> usize {
        self.image.dims()[2]
    }

    pub fn height(&self) -> usize {
        self.image.dims()[1]
    }

    /// View the image as a [1, 3, H, W] batch.
    pub fn batch_image(&self) -> Tensor {
        let d = self.image.dims();
        self.image
            .reshaped(&[1, 3, d[1], d[2]])
            .expect("rank-3 image reshapes to a singleton batch")
    }
}

/// Which labels the segmentation map carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SegRegime {
    /// Stuff classes only; objects do not overwrite the stuff labels.
    Stuff10,
    /// Stuff plus object classes; box interiors take the object label
    /// (index 10 + class - 1).
    Full30,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Shape {
    Square,
    Disc,
    Triangle,
    Diamond,
    Cross,
}

/// An object category: its name, the stuff it lives on, and its
/// class-specific appearance.
#[derive(Clone, Debug)]
pub struct ObjectClassSpec {
    pub name: String,
    /// Canonical stuff index of the band this class is coupled to.
    pub stuff: usize,
    pub color: [f64; 3],
    pub shape: Shape,
}

/// Colors for context-coupled objects: class-agnostic by design, so
/// appearance alone cannot identify the class.
const AMBIGUOUS_COLORS: [[f64; 3]; 3] = [
    [0.96, 0.96, 0.93],
    [0.06, 0.06, 0.08],
    [0.45, 0.27, 0.12],
];

const AMBIGUOUS_SHAPES: [Shape; 3] = [Shape::Square, Shape::Disc, Shape::Triangle];

/// Scene generator settings.
#[derive(Clone, Debug)]
pub struct SceneGenSpec {
    pub image_size: usize,
    pub count: usize,
    /// Context-coupling strength in [0, 1].
    pub rho: f64,
    pub seed: u64,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Probability that an object is drawn in the small size range.
    pub small_fraction: f64,
    /// Inclusive box side ranges per size bin.
    pub small_side: (usize, usize),
    pub medium_side: (usize, usize),
    pub bands_min: usize,
    pub bands_max: usize,
    pub regime: SegRegime,
    pub object_classes: Vec<ObjectClassSpec>,
}

impl SceneGenSpec {
    pub fn desk(count: usize, rho: f64, seed: u64) -> SceneGenSpec {
        let classes = vec![
            ("plane", "sky", [0.93, 0.11, 0.14], Shape::Square),
            ("boat", "water", [1.0, 0.85, 0.0], Shape::Disc),
            ("car", "road", [0.88, 0.12, 0.84], Shape::Triangle),
            ("sheep", "ground", [0.0, 0.87, 0.87], Shape::Diamond),
            ("bird", "tree", [0.55, 0.1, 0.95], Shape::Cross),
        ];
        let vocab = StuffVocabulary::canonical();
        SceneGenSpec {
            image_size: 64,
            count,
            rho,
            seed,
            min_objects: 1,
            max_objects: 4,
            small_fraction: 0.5,
            small_side: (10, 26),
            medium_side: (34, 46),
            bands_min: 2,
            bands_max: 4,
            regime: SegRegime::Stuff10,
            object_classes: classes
                .into_iter()
                .map(|(name, stuff, color, shape)| ObjectClassSpec {
                    name: name.to_string(),
                    stuff: vocab.index_of(stuff).unwrap(),
                    color,
                    shape,
                })
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::invalid(format!(
                "rho must be in [0, 1], got {}",
                self.rho
            )));
        }
        if !(0.0..=1.0).contains(&self.small_fraction) {
            return Err(Error::invalid("small_fraction must be in [0, 1]"));
        }
        if self.image_size < 16 {
            return Err(Error::invalid("image_size must be at least 16"));
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return Err(Error::invalid("need 1 <= min_objects <= max_objects"));
        }
        if self.object_classes.is_empty() {
            return Err(Error::invalid("need at least one object class"));
        }
        let check_side = |(lo, hi): (usize, usize)| lo >= 4 && lo <= hi && hi < self.image_size;
        if !check_side(self.small_side) || !check_side(self.medium_side) {
            return Err(Error::invalid(format!(
                "object size ranges must fit the {}px image",
                self.image_size
            )));
        }
        if self.bands_min < 2 || self.bands_min > self.bands_max {
            return Err(Error::invalid("need 2 <= bands_min <= bands_max"));
        }
        if self.bands_max > self.object_classes.len().max(2) {
            return Err(Error::invalid(
                "bands_max cannot exceed the number of coupled stuff classes",
            ));
        }
        for c in &self.object_classes {
            if c.stuff == 0 || c.stuff >= STUFF_CLASSES.len() {
                return Err(Error::invalid(format!(
                    "object class {} coupled to invalid stuff index {}",
                    c.name, c.stuff
                )));
            }
        }
        Ok(())
    }

    /// Segmentation class count for the regime.
    pub fn num_seg_classes(&self) -> usize {
        match self.regime {
            SegRegime::Stuff10 => STUFF_CLASSES.len(),
            SegRegime::Full30 => STUFF_CLASSES.len() + self.object_classes.len(),
        }
    }

    /// Segmentation class names, vocab order.
    pub fn seg_class_names(&self) -> Vec<String> {
        let mut names: Vec<String> = STUFF_CLASSES.iter().map(|s| s.to_string()).collect();
        if self.regime == SegRegime::Full30 {
            names.extend(self.object_classes.iter().map(|c| c.name.clone()));
        }
        names
    }
}

/// Vertical stuff bands, ordered sky-first for a plausible look.
fn band_rank(stuff: usize) -> usize {
    // sky, mountain, building, wall, tree, floor, road, ground, water
    const ORDER: [usize; 9] = [5, 9, 8, 1, 4, 2, 6, 7, 3];
    ORDER.iter().position(|&s| s == stuff).unwrap_or(ORDER.len())
}

/// Band fill colors, deliberately close together: under the per-pixel
/// noise the bands overlap pixel-wise, so telling them apart needs
/// spatial pooling. Dense segmentation supervision resolves that
/// quickly; a detector has to infer it from sparse box labels alone.
/// Indexed by canonical stuff id; classes that never form bands reuse
/// the display palette.
fn band_color(stuff: usize) -> [f64; 3] {
    match STUFF_CLASSES[stuff] {
        "sky" => [0.55, 0.60, 0.70],
        "water" => [0.45, 0.55, 0.68],
        "road" => [0.52, 0.52, 0.58],
        "ground" => [0.60, 0.55, 0.48],
        "tree" => [0.44, 0.56, 0.50],
        "wall" => [0.58, 0.57, 0.54],
        "floor" => [0.50, 0.48, 0.46],
        "building" => [0.56, 0.50, 0.52],
        "mountain" => [0.48, 0.52, 0.56],
        _ => STUFF_COLORS[stuff],
    }
}

fn draw_shape(image: &mut Tensor, rect: &BBox, shape: Shape, color: [f64; 3]) {
    let dims = image.dims().to_vec();
    let (h, w) = (dims[1], dims[2]);
    let data = image.data_mut();
    let (cx, cy) = rect.center();
    let rx = rect.width() * 0.5;
    let ry = rect.height() * 0.5;
    let x_lo = rect.x0.floor().max(0.0) as usize;
    let x_hi = (rect.x1.ceil() as usize).min(w);
    let y_lo = rect.y0.floor().max(0.0) as usize;
    let y_hi = (rect.y1.ceil() as usize).min(h);
    for y in y_lo..y_hi {
        for x in x_lo..x_hi {
            let px = x as f64 + 0.5;
            let py = y as f64 + 0.5;
            if px < rect.x0 || px > rect.x1 || py < rect.y0 || py > rect.y1 {
                continue;
            }
            let dx = (px - cx) / rx;
            let dy = (py - cy) / ry;
            let inside = match shape {
                Shape::Square => true,
                Shape::Disc => dx * dx + dy * dy <= 1.0,
                Shape::Triangle => {
                    // apex top-center, base at the bottom
                    let t = (py - rect.y0) / rect.height();
                    dx.abs() <= t
                }
                Shape::Diamond => dx.abs() + dy.abs() <= 1.0,
                Shape::Cross => dx.abs() <= 1.0 / 3.0 || dy.abs() <= 1.0 / 3.0,
            };
            if inside {
                for c in 0..3 {
                    data[(c * h + y) * w + x] = color[c];
                }
            }
        }
    }
}

/// Deterministically generate scene `index` of the run described by
/// `spec`.
pub fn generate_scene(spec: &SceneGenSpec, index: usize) -> Result<SceneSample> {
    spec.validate()?;
    let mut rng = Rng::stream_indexed(spec.seed, "scene", index as u64);
    let size = spec.image_size;

    // 1. pick bands: distinct coupled stuff classes, sky-first order
    let n_bands = spec.bands_min + rng.below(spec.bands_max - spec.bands_min + 1);
    let stuff_pool: Vec<usize> = spec.object_classes.iter().map(|c| c.stuff).collect();
    let mut band_stuff = rng.choose(&stuff_pool, n_bands);
    band_stuff.sort_by_key(|&s| band_rank(s));

    // 2. band boundaries with a minimum height
    let min_band = (size / 8).max(4);
    let slack = size - n_bands * min_band;
    let mut cuts: Vec<usize> = (0..n_bands - 1).map(|_| rng.below(slack + 1)).collect();
    cuts.sort_unstable();
    let mut heights = Vec::with_capacity(n_bands);
    let mut prev = 0;
    for &c in &cuts {
        heights.push(min_band + c - prev);
        prev = c;
    }
    heights.push(min_band + slack - prev);

    // 3. paint bands
    let mut image = Tensor::zeros(&[3, size, size])?;
    let mut seg = LabelMap::filled(size, size, 0);
    let mut band_of_row = vec![0usize; size];
    {
        let data = image.data_mut();
        let mut y = 0;
        for (b, &bh) in heights.iter().enumerate() {
            let stuff = band_stuff[b];
            let base = band_color(stuff);
            let jitter = rng.uniform(-0.03, 0.03);
            for _ in 0..bh {
                for x in 0..size {
                    let noise = rng.uniform(-0.06, 0.06);
                    for c in 0..3 {
                        data[(c * size + y) * size + x] =
                            (base[c] + jitter + noise).clamp(0.0, 1.0);
                    }
                    seg.set(x, y, stuff as u8);
                }
                band_of_row[y] = b;
                y += 1;
            }
        }
    }

    // 4. place objects
    let stuff_to_class: BTreeMap<usize, usize> = spec
        .object_classes
        .iter()
        .enumerate()
        .map(|(i, c)| (c.stuff, i + 1))
        .collect();
    let n_obj = spec.min_objects + rng.below(spec.max_objects - spec.min_objects + 1);
    let mut boxes: Vec<GtBox> = Vec::new();
    for _ in 0..n_obj {
        let mut placed = None;
        for _attempt in 0..20 {
            let range = if rng.unit() < spec.small_fraction {
                spec.small_side
            } else {
                spec.medium_side
            };
            let bw = range.0 + rng.below(range.1 - range.0 + 1);
            let bh = range.0 + rng.below(range.1 - range.0 + 1);
            let x0 = rng.below(size - bw + 1);
            let y0 = rng.below(size - bh + 1);
            let rect = BBox::new(x0 as f64, y0 as f64, (x0 + bw) as f64, (y0 + bh) as f64);
            // objects never overlap, so every box interior keeps its own
            // appearance (and, in the 30-class regime, its own labels)
            let intersects = |a: &BBox, b: &BBox| {
                a.x0 < b.x1 && b.x0 < a.x1 && a.y0 < b.y1 && b.y0 < a.y1
            };
            if boxes.iter().any(|b| intersects(&b.rect, &rect)) {
                continue;
            }
            placed = Some(rect);
            break;
        }
        let Some(rect) = placed else { continue };
        let band = band_of_row[(rect.center().1 as usize).min(size - 1)];
        let band_class = stuff_to_class[&band_stuff[band]];
        let (class, shape, color) = if rng.unit() < spec.rho {
            // context decides the class; appearance comes from the shared
            // ambiguous pool
            let shape = AMBIGUOUS_SHAPES[rng.below(AMBIGUOUS_SHAPES.len())];
            let color = AMBIGUOUS_COLORS[rng.below(AMBIGUOUS_COLORS.len())];
            (band_class, shape, color)
        } else {
            let class = 1 + rng.below(spec.object_classes.len());
            let cs = &spec.object_classes[class - 1];
            (class, cs.shape, cs.color)
        };
        draw_shape(&mut image, &rect, shape, color);
        if spec.regime == SegRegime::Full30 {
            let label = (STUFF_CLASSES.len() + class - 1) as u8;
            for y in rect.y0 as usize..rect.y1 as usize {
                for x in rect.x0 as usize..rect.x1 as usize {
                    seg.set(x, y, label);
                }
            }
        }
        boxes.push(GtBox::new(rect, class));
    }

    Ok(SceneSample {
        image,
        boxes,
        seg: Some(seg),
    })
}

/// A set of scenes with their string ids and segmentation vocabulary.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub ids: Vec<String>,
    pub samples: Vec<SceneSample>,
    pub seg_classes: Vec<String>,
}

impl Dataset {
    pub fn generate(spec: &SceneGenSpec) -> Result<Dataset> {
        spec.validate()?;
        let mut samples = Vec::with_capacity(spec.count);
        let mut ids = Vec::with_capacity(spec.count);
        for i in 0..spec.count {
            samples.push(generate_scene(spec, i)?);
            ids.push(format!("{i:06}"));
        }
        Ok(Dataset {
            ids,
            samples,
            seg_classes: spec.seg_class_names(),
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn has_seg_labels(&self) -> bool {
        !self.samples.is_empty() && self.samples.iter().all(|s| s.seg.is_some())
    }

    /// Copy with the segmentation labels removed (a dataset "without
    /// stuff labels").
    pub fn without_seg(&self) -> Dataset {
        let mut d = self.clone();
        for s in &mut d.samples {
            s.seg = None;
        }
        d
    }
}

/// Quantize a [3, H, W] image tensor to interleaved 8-bit RGB.
pub fn image_to_rgb8(image: &Tensor) -> Vec<u8> {
    let d = image.dims();
    let (h, w) = (d[1], d[2]);
    let data = image.data();
    let mut out = vec![0u8; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = data[(c * h + y) * w + x];
                out[(y * w + x) * 3 + c] = (v * 255.0).round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    out
}

/// Inverse of [`image_to_rgb8`] up to quantization.
pub fn rgb8_to_image(w: usize, h: usize, rgb: &[u8]) -> Result<Tensor> {
    let mut t = Tensor::zeros(&[3, h, w])?;
    let data = t.data_mut();
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                data[(c * h + y) * w + x] = rgb[(y * w + x) * 3 + c] as f64 / 255.0;
            }
        }
    }
    Ok(t)
}

fn boxes_to_text(boxes: &[GtBox]) -> String {
    let mut s = String::new();
    for b in boxes {
        s.push_str(&format!(
            "{} {:?} {:?} {:?} {:?}\n",
            b.class, b.rect.x0, b.rect.y0, b.rect.x1, b.rect.y1
        ));
    }
    s
}

fn boxes_from_text(text: &str, path: &str) -> Result<Vec<GtBox>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let bad =
            |what: &str| Error::malformed(path, lineno + 1, format!("{what} in box line {line:?}"));
        if fields.len() != 5 {
            return Err(bad("expected 5 fields"));
        }
        let class: usize = fields[0].parse().map_err(|_| bad("bad class"))?;
        let mut coords = [0.0f64; 4];
        for (i, f) in fields[1..].iter().enumerate() {
            coords[i] = f.parse().map_err(|_| bad("bad coordinate"))?;
        }
        out.push(GtBox::new(
            BBox::new(coords[0], coords[1], coords[2], coords[3]),
            class,
        ));
    }
    Ok(out)
}

fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Write the full directory layout. Segmentation maps are written only
/// when `include_seg` is set and the sample carries labels.
pub fn write_dataset_opts(ds: &Dataset, dir: &Path, include_seg: bool) -> Result<()> {
    ensure_dir(dir)?;
    ensure_dir(&dir.join("images"))?;
    ensure_dir(&dir.join("boxes"))?;
    let write_seg = include_seg && ds.samples.iter().any(|s| s.seg.is_some());
    if write_seg {
        ensure_dir(&dir.join("seg"))?;
    }
    for (id, sample) in ds.ids.iter().zip(&ds.samples) {
        let (w, h) = (sample.width(), sample.height());
        pnm::write_ppm(
            &dir.join("images").join(format!("{id}.ppm")),
            w,
            h,
            &image_to_rgb8(&sample.image),
        )?;
        let boxes_path = dir.join("boxes").join(format!("{id}.txt"));
        fs::write(&boxes_path, boxes_to_text(&sample.boxes))
            .map_err(|e| Error::io(boxes_path.display().to_string(), e))?;
        if write_seg {
            if let Some(seg) = &sample.seg {
                pnm::write_pgm(
                    &dir.join("seg").join(format!("{id}.pgm")),
                    seg.w,
                    seg.h,
                    &seg.data,
                )?;
            }
        }
    }
    let manifest = dir.join("manifest.txt");
    fs::write(&manifest, ds.ids.join("\n") + "\n")
        .map_err(|e| Error::io(manifest.display().to_string(), e))?;
    let vocab = dir.join("vocab.txt");
    fs::write(&vocab, ds.seg_classes.join("\n") + "\n")
        .map_err(|e| Error::io(vocab.display().to_string(), e))?;
    Ok(())
}

pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    write_dataset_opts(ds, dir, true)
}

/// Read a dataset directory. A directory without a manifest is an empty
/// dataset; a missing `seg/` directory yields samples without labels.
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = dir.join("manifest.txt");
    if !manifest.exists() {
        return Ok(Dataset {
            ids: Vec::new(),
            samples: Vec::new(),
            seg_classes: STUFF_CLASSES.iter().map(|s| s.to_string()).collect(),
        });
    }
    let text =
        fs::read_to_string(&manifest).map_err(|e| Error::io(manifest.display().to_string(), e))?;
    let ids: Vec<String> = text
        .lines()
        .map(|l| l.trim().to_string())
        .filter(|l| !l.is_empty())
        .collect();
    let seg_classes = {
        let vpath = dir.join("vocab.txt");
        if vpath.exists() {
            fs::read_to_string(&vpath)
                .map_err(|e| Error::io(vpath.display().to_string(), e))?
                .lines()
                .map(|l| l.trim().to_string())
                .filter(|l| !l.is_empty())
                .collect()
        } else {
            STUFF_CLASSES.iter().map(|s| s.to_string()).collect()
        }
    };
    let has_seg = dir.join("seg").is_dir();
    let mut samples = Vec::with_capacity(ids.len());
    for id in &ids {
        let (w, h, rgb) = pnm::read_ppm(&dir.join("images").join(format!("{id}.ppm")))?;
        let image = rgb8_to_image(w, h, &rgb)?;
        let boxes_path = dir.join("boxes").join(format!("{id}.txt"));
        let btext = fs::read_to_string(&boxes_path)
            .map_err(|e| Error::io(boxes_path.display().to_string(), e))?;
        let boxes = boxes_from_text(&btext, &boxes_path.display().to_string())?;
        let seg = if has_seg {
            let (sw, sh, gray) = pnm::read_pgm(&dir.join("seg").join(format!("{id}.pgm")))?;
            Some(LabelMap {
                w: sw,
                h: sh,
                data: gray,
            })
        } else {
            None
        };
        samples.push(SceneSample { image, boxes, seg });
    }
    Ok(Dataset {
        ids,
        samples,
        seg_classes,
    })
}
