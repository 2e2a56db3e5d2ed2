mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{ConfigError, RunConfig};
use stuffnet_core::boxgeom::Detection;
use stuffnet_core::data::{self, Dataset, LabelMap};
use stuffnet_core::error::Error as CoreError;
use stuffnet_core::evalkit::{
    self, EvalReport, ImageEval, SegReport, SizeBin, SizeBins,
};
use stuffnet_core::model::{
    load_checkpoint, save_checkpoint, Model, PostprocessConfig,
};
use stuffnet_core::pnm;
use stuffnet_core::render::render_overlay;
use stuffnet_core::train::{
    self, hallucinate_dataset, smoothed_total, train_constrained, HallucinatedLabels,
};

#[derive(Parser)]
#[command(
    name = "stuffnet",
    about = "Two-branch detection + stuff segmentation: data generation, training, evaluation"
)]
struct Cli {
    /// Config file of `section.key = value` lines (# comments allowed)
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Seed override applied to both data generation and training
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Determinism flag; all kernels here are bit-deterministic in
    /// either mode
    #[arg(long, global = true, default_value = "on", value_parser = ["on", "off"])]
    deterministic: String,

    /// Override a config key, e.g. --set train.iterations=100
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset directory
    GenData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write a checkpoint
    Train {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Loss log destination (one line per iteration)
        #[arg(long)]
        log: Option<PathBuf>,
        /// Directory of hallucinated P5 label maps; switches to
        /// feature-constrained training
        #[arg(long)]
        hallucinated_labels: Option<PathBuf>,
    },
    /// Write hallucinated segmentation label maps for a dataset
    Hallucinate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Output directory (default: <dataset>/seg_hallucinated)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate detections from a checkpoint or a detections dump
    Eval {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        detections_file: Option<PathBuf>,
        #[arg(long, default_value = "all")]
        size_bin: String,
    },
    /// Run the detector over a dataset and dump detections
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render detection boxes and segmentation overlays
    Render {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Comma-separated image ids (manifest ids or plain indices)
        #[arg(long)]
        ids: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        score_thresh: Option<f64>,
    },
}

enum CliError {
    Config(String),
    Core(CoreError),
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        CliError::Core(e)
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "{m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl CliError {
    /// Exit codes: 2 config, 3 I/O, 4 capability/label mismatch.
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Core(e) => match e {
                CoreError::Io { .. } | CoreError::Malformed { .. } => 3,
                CoreError::Capability(_) | CoreError::MissingSegLabels(_) => 4,
                _ => 2,
            },
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        cfg.apply_file(path)?;
    }
    for assignment in &cli.overrides {
        cfg.apply_override(assignment)?;
    }
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
        cfg.data.seed = seed;
    }
    cfg.deterministic = cli.deterministic == "on";
    cfg.validate()?;

    match cli.cmd {
        Cmd::GenData { out } => cmd_gen_data(&cfg, &out),
        Cmd::Train {
            dataset,
            out,
            log,
            hallucinated_labels,
        } => cmd_train(&cfg, &dataset, &out, log.as_deref(), hallucinated_labels.as_deref()),
        Cmd::Hallucinate {
            checkpoint,
            dataset,
            out,
        } => cmd_hallucinate(&checkpoint, &dataset, out.as_deref()),
        Cmd::Eval {
            dataset,
            checkpoint,
            detections_file,
            size_bin,
        } => cmd_eval(
            &cfg,
            &dataset,
            checkpoint.as_deref(),
            detections_file.as_deref(),
            &size_bin,
        ),
        Cmd::Infer {
            checkpoint,
            dataset,
            out,
        } => cmd_infer(&cfg, &checkpoint, &dataset, &out),
        Cmd::Render {
            checkpoint,
            dataset,
            ids,
            out,
            score_thresh,
        } => cmd_render(
            &cfg,
            &checkpoint,
            &dataset,
            &ids,
            &out,
            score_thresh.unwrap_or(cfg.render_score_thresh),
        ),
    }
}

fn cmd_gen_data(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let ds = Dataset::generate(&cfg.data)?;
    data::write_dataset_opts(&ds, out, cfg.write_seg)?;

    let bins = SizeBins::new(cfg.eval.small_area, cfg.eval.medium_area)?;
    let mut by_bin = [0usize; 3];
    let mut by_class = vec![0usize; cfg.data.object_classes.len()];
    let mut total = 0usize;
    for s in &ds.samples {
        for b in &s.boxes {
            total += 1;
            match bins.bin_of(b.rect.area()) {
                SizeBin::Small => by_bin[0] += 1,
                SizeBin::Medium => by_bin[1] += 1,
                _ => by_bin[2] += 1,
            }
            if b.class >= 1 && b.class <= by_class.len() {
                by_class[b.class - 1] += 1;
            }
        }
    }
    println!("wrote {} scenes to {}", ds.len(), out.display());
    println!(
        "objects {total}: small {} medium {} large {}",
        by_bin[0], by_bin[1], by_bin[2]
    );
    let names = cfg.object_class_names();
    let per_class: Vec<String> = names
        .iter()
        .zip(&by_class)
        .map(|(n, c)| format!("{n} {c}"))
        .collect();
    println!("per class: {}", per_class.join(", "));
    Ok(())
}

fn read_hallucinated(dir: &Path, ds: &Dataset) -> Result<HallucinatedLabels, CliError> {
    let mut maps = Vec::with_capacity(ds.len());
    for id in &ds.ids {
        let path = dir.join(format!("{id}.pgm"));
        if !path.exists() {
            return Err(CliError::Core(CoreError::MissingSegLabels(format!(
                "no hallucinated map for image {id} in {}",
                dir.display()
            ))));
        }
        let (w, h, data) = pnm::read_pgm(&path)?;
        maps.push(LabelMap { w, h, data });
    }
    Ok(HallucinatedLabels {
        maps,
        source: dir.display().to_string(),
    })
}

fn cmd_train(
    cfg: &RunConfig,
    dataset: &Path,
    out: &Path,
    log_path: Option<&Path>,
    hallucinated: Option<&Path>,
) -> Result<(), CliError> {
    let ds = data::read_dataset(dataset)?;
    let mut model = Model::build(cfg.model.clone(), cfg.train.seed)?;
    let mut tc = cfg.train.clone();
    tc.proposals = cfg.train.proposals;

    let log = match hallucinated {
        Some(dir) => {
            let labels = read_hallucinated(dir, &ds)?;
            train_constrained(&mut model, &ds, &labels, &tc)?
        }
        None => train::train(&mut model, &ds, &tc)?,
    };

    save_checkpoint(&model, out)?;
    if let Some(path) = log_path {
        let text: String = log.iter().map(|r| r.log_line() + "\n").collect();
        fs::write(path, text).map_err(|e| CoreError::io(path.display().to_string(), e))?;
    }
    println!(
        "trained {} for {} iterations; final smoothed loss {:.6}",
        cfg.model.variant,
        log.len(),
        smoothed_total(&log, 100, log.len())
    );
    println!("checkpoint written to {}", out.display());
    Ok(())
}

fn cmd_hallucinate(checkpoint: &Path, dataset: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let model = load_checkpoint(checkpoint)?;
    let ds = data::read_dataset(dataset)?;
    let labels = hallucinate_dataset(&model, &ds)?;
    let out_dir = out
        .map(|p| p.to_path_buf())
        .unwrap_or_else(|| dataset.join("seg_hallucinated"));
    fs::create_dir_all(&out_dir).map_err(|e| CoreError::io(out_dir.display().to_string(), e))?;
    for (id, map) in ds.ids.iter().zip(&labels.maps) {
        pnm::write_pgm(&out_dir.join(format!("{id}.pgm")), map.w, map.h, &map.data)?;
    }
    println!(
        "wrote {} hallucinated maps (source {}) to {}",
        labels.maps.len(),
        labels.source,
        out_dir.display()
    );
    Ok(())
}

/// Detect on every image of a dataset.
fn detect_all(
    cfg: &RunConfig,
    model: &Model,
    ds: &Dataset,
) -> Result<Vec<Vec<Detection>>, CliError> {
    let prop = cfg.train.proposals;
    let post = PostprocessConfig {
        score_floor: cfg.eval.score_floor,
        nms_iou: cfg.eval.nms_iou,
        max_dets: cfg.eval.max_dets,
    };
    let mut out = Vec::with_capacity(ds.len());
    for s in &ds.samples {
        let (dets, _) = model.detect(&s.batch_image(), &prop, &post)?;
        out.push(dets);
    }
    Ok(out)
}

fn print_report(
    report: &EvalReport,
    names: &[String],
    bin: SizeBin,
    seg: Option<(&SegReport, &[String])>,
) {
    // table block mirroring per-class AP columns plus mAP
    let header: Vec<String> = names.iter().map(|n| format!("{n:>8}")).collect();
    println!("size bin: {}", bin.name());
    println!("class  {} | {:>8}", header.join(" "), "mAP");
    let row: Vec<String> = report
        .per_class_ap
        .iter()
        .map(|ap| format!("{:8.4}", ap))
        .collect();
    println!("AP     {} | {:8.4}", row.join(" "), report.map);

    // machine-readable dump
    for (n, ap) in names.iter().zip(&report.per_class_ap) {
        println!("ap.{n}={ap:.4}");
    }
    println!("map={:.4}", report.map);
    println!("size_bin={}", bin.name());

    if let Some((seg, classes)) = seg {
        println!("segmentation:");
        for (name, iou) in classes.iter().zip(&seg.per_class_iou) {
            match iou {
                Some(v) => println!("seg.iou.{name}={v:.4}"),
                None => println!("seg.iou.{name}=absent"),
            }
        }
        println!("seg.miou={:.4}", seg.mean_iou);
        println!("seg.pixel_acc={:.4}", seg.pixel_accuracy);
    }
}

fn cmd_eval(
    cfg: &RunConfig,
    dataset: &Path,
    checkpoint: Option<&Path>,
    detections_file: Option<&Path>,
    size_bin: &str,
) -> Result<(), CliError> {
    let bin = SizeBin::parse(size_bin)?;
    let ds = data::read_dataset(dataset)?;
    let names = cfg.object_class_names();
    let num_classes = names.len();

    let (per_image, seg_pairs): (Vec<Vec<Detection>>, Option<Vec<LabelMap>>) =
        match (checkpoint, detections_file) {
            (_, Some(file)) => {
                let flat = evalkit::read_detections(file)?;
                let mut per: Vec<Vec<Detection>> = vec![Vec::new(); ds.len()];
                for (id, det) in flat {
                    match ds.ids.iter().position(|i| *i == id) {
                        Some(idx) => per[idx].push(det),
                        None => {
                            return Err(CliError::Config(format!(
                                "detections file references unknown image id {id:?}"
                            )))
                        }
                    }
                }
                (per, None)
            }
            (Some(ckpt), None) => {
                let model = load_checkpoint(ckpt)?;
                let dets = detect_all(cfg, &model, &ds)?;
                // segmentation metrics when both sides have labels
                let seg = if model.spec().variant.has_seg_branch() && ds.has_seg_labels() {
                    Some(
                        hallucinate_dataset(&model, &ds)?
                            .maps,
                    )
                } else {
                    None
                };
                (dets, seg)
            }
            (None, None) => {
                return Err(CliError::Config(
                    "eval needs --checkpoint or --detections-file".into(),
                ))
            }
        };

    let images: Vec<ImageEval> = per_image
        .into_iter()
        .zip(&ds.samples)
        .map(|(dets, s)| ImageEval {
            dets,
            gts: s.boxes.clone(),
        })
        .collect();

    let bins = SizeBins::new(cfg.eval.small_area, cfg.eval.medium_area)?;
    let filter = (bin != SizeBin::All).then_some((bin, bins));
    let report = evalkit::evaluate_map(&images, num_classes, cfg.eval.iou_thresh, filter);
    if bin != SizeBin::All && report.counted_classes() == 0 {
        println!("warning: no ground truth in size bin {}", bin.name());
    }

    let seg_report = match (&seg_pairs, ds.has_seg_labels()) {
        (Some(preds), true) => {
            let gts: Vec<&LabelMap> = ds.samples.iter().map(|s| s.seg.as_ref().unwrap()).collect();
            let k = ds.seg_classes.len();
            Some(evalkit::seg_metrics_many(
                preds.iter().zip(gts.into_iter()),
                k,
            )?)
        }
        _ => None,
    };

    print_report(
        &report,
        &names,
        bin,
        seg_report.as_ref().map(|r| (r, ds.seg_classes.as_slice())),
    );
    Ok(())
}

fn cmd_infer(cfg: &RunConfig, checkpoint: &Path, dataset: &Path, out: &Path) -> Result<(), CliError> {
    let model = load_checkpoint(checkpoint)?;
    let ds = data::read_dataset(dataset)?;
    let dets = detect_all(cfg, &model, &ds)?;
    let mut entries = Vec::new();
    for (id, per_image) in ds.ids.iter().zip(dets) {
        for d in per_image {
            entries.push((id.clone(), d));
        }
    }
    evalkit::write_detections(out, &entries)?;
    println!(
        "wrote {} detections for {} images to {}",
        entries.len(),
        ds.len(),
        out.display()
    );
    Ok(())
}

fn cmd_render(
    cfg: &RunConfig,
    checkpoint: &Path,
    dataset: &Path,
    ids: &str,
    out: &Path,
    score_thresh: f64,
) -> Result<(), CliError> {
    let model = load_checkpoint(checkpoint)?;
    let ds = data::read_dataset(dataset)?;
    fs::create_dir_all(out).map_err(|e| CoreError::io(out.display().to_string(), e))?;
    let prop = cfg.train.proposals;
    let post = PostprocessConfig {
        score_floor: cfg.eval.score_floor,
        nms_iou: cfg.eval.nms_iou,
        max_dets: cfg.eval.max_dets,
    };

    for raw in ids.split(',') {
        let raw = raw.trim();
        if raw.is_empty() {
            continue;
        }
        let idx = ds
            .ids
            .iter()
            .position(|i| i == raw)
            .or_else(|| {
                raw.parse::<usize>()
                    .ok()
                    .and_then(|n| ds.ids.iter().position(|i| *i == format!("{n:06}")))
            })
            .ok_or_else(|| CliError::Config(format!("unknown image id {raw:?}")))?;
        let sample = &ds.samples[idx];
        let (dets, seg_map) = model.detect(&sample.batch_image(), &prop, &post)?;
        let seg_labels = seg_map.as_ref().map(train::argmax_label_map);
        let (w, h, rgb) = render_overlay(&sample.image, &dets, seg_labels.as_ref(), score_thresh);
        let path = out.join(format!("{}.ppm", ds.ids[idx]));
        pnm::write_ppm(&path, w, h, &rgb)?;
        println!(
            "rendered {} ({} detections at or above {score_thresh})",
            path.display(),
            dets.iter().filter(|d| d.score >= score_thresh).count()
        );
    }
    Ok(())
}
