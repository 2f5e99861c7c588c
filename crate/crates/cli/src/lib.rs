//! Argument parsing and command dispatch for the `ctsf` binary.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use ctsf_core::cls::{train_classifier, ClsCheckpoint};
use ctsf_core::dataset::{generate_phantom, write_phantom_bundle, DetectionSample, PhantomSpec};
use ctsf_core::det::{anchors_from_sizes, train_detector, DetCheckpoint};
use ctsf_core::pipeline::{
    discover_bundles, evaluate_classification, evaluate_detection, evaluate_segmentation, prepare_bundles, read_det_samples, read_patches,
    read_seg_cases, run_inference, seg_training_pairs, series_id_of, write_case_outputs, PipelineConfig, PreparedLayout, RunManifest,
};
use ctsf_core::seg::{train_segmenter, SegCheckpoint};
use ctsf_core::train::{CheckpointMeta, TrainConfig};
use ctsf_core::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "ctsf", version, about = "Lung segmentation, nodule detection and malignancy classification on CT volumes")]
pub struct Cli {
    /// TOML file layered over the built-in defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the seed of the config file for every stage.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory. Each command has its own default under the
    /// configured paths.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write synthetic CT phantoms with lung masks and nodule annotations.
    SynthGen(SynthArgs),
    /// Normalise and resample bundles into segmentation, detection and
    /// classification training sets.
    Prep(PrepArgs),
    /// Train the 3D lung segmenter.
    TrainSeg(TrainArgs),
    /// Train the axial-slice nodule detector.
    TrainDet(DetTrainArgs),
    /// Train the patch malignancy classifier.
    TrainCls(TrainArgs),
    /// Dice of a segmentation checkpoint on prepared cases.
    EvalSeg(EvalArgs),
    /// mAP@50 and mAP@50:95 of a detection checkpoint on prepared slices.
    EvalDet(EvalArgs),
    /// Confusion scores of a classification checkpoint on prepared patches.
    EvalCls(EvalArgs),
    /// Run all three stages on one volume.
    Infer(InferArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::SynthGen(_) => "synth-gen",
            Command::Prep(_) => "prep",
            Command::TrainSeg(_) => "train-seg",
            Command::TrainDet(_) => "train-det",
            Command::TrainCls(_) => "train-cls",
            Command::EvalSeg(_) => "eval-seg",
            Command::EvalDet(_) => "eval-det",
            Command::EvalCls(_) => "eval-cls",
            Command::Infer(_) => "infer",
        }
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 4)]
    pub count: usize,
    /// Nodules per phantom.
    #[arg(long)]
    pub nodules: Option<usize>,
    /// Voxels per side of each phantom.
    #[arg(long)]
    pub cube_size: Option<usize>,
    #[arg(long)]
    pub malignant_fraction: Option<f64>,
}

#[derive(Debug, Args)]
pub struct PrepArgs {
    /// Directory of bundles written by `synth-gen` (default: paths.data_root).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Canonical cube size (default: cube from the config).
    #[arg(long)]
    pub cube: Option<usize>,
    #[arg(long)]
    pub crop_margin: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Prepared data directory (default: <paths.output_root>/prepared).
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub validation_fraction: Option<f64>,
    /// Stop once the worst per-sample training score reaches this value.
    #[arg(long)]
    pub target_score: Option<f64>,
}

impl TrainArgs {
    fn apply(&self, t: &mut TrainConfig) {
        if let Some(v) = self.epochs {
            t.epochs = v;
        }
        if let Some(v) = self.max_steps {
            t.max_steps = Some(v);
        }
        if let Some(v) = self.lr {
            t.learning_rate = v;
        }
        if let Some(v) = self.batch_size {
            t.batch_size = v;
        }
        if let Some(v) = self.validation_fraction {
            t.validation_fraction = v;
        }
        if let Some(v) = self.target_score {
            t.target_train_score = Some(v);
        }
    }
}

#[derive(Debug, Args)]
pub struct DetTrainArgs {
    #[command(flatten)]
    pub train: TrainArgs,
    /// Replace the configured anchors with k-means (k = 9) over the
    /// training box sizes.
    #[arg(long)]
    pub fit_anchors: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Checkpoint directory (default: the one named in the config).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    /// CT volume (`.mhd`) in Hounsfield units.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Reference lung labels on the same grid, for Dice in the report.
    #[arg(long)]
    pub mask: Option<PathBuf>,
    #[arg(long)]
    pub seg_threshold: Option<f64>,
    /// Keep detections whose centre falls outside the predicted lung.
    #[arg(long)]
    pub no_mask_gate: bool,
    #[arg(long)]
    pub no_overlays: bool,
}

/// What a successful command produced.
#[derive(Clone, Debug, Serialize)]
pub struct Outcome {
    pub command: String,
    pub out: PathBuf,
    pub outputs: Vec<String>,
    pub summary: Value,
}

/// One JSON object on one line, for scripts reading stderr.
pub fn error_line(command: &str, err: &Error) -> String {
    let stage = match err {
        Error::Stage { stage, .. } => Some(*stage),
        _ => None,
    };
    json!({ "command": command, "error": err.to_string(), "stage": stage }).to_string()
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").map_err(|e| Error::io(path, e))
}

fn prepared_dir(data: &Option<PathBuf>, config: &PipelineConfig) -> PathBuf {
    data.clone().unwrap_or_else(|| config.paths.output_root.join("prepared"))
}

fn training_summary<C>(meta: &CheckpointMeta<C>) -> Value {
    let last = meta.history.last();
    json!({
        "steps": meta.steps,
        "epochs_run": meta.epochs_run,
        "best_epoch": meta.best_epoch,
        "final_loss": meta.final_loss(),
        "train_score": last.and_then(|r| r.train_score),
        "train_score_min": last.and_then(|r| r.train_score_min),
        "val_score": last.and_then(|r| r.val_score),
    })
}

/// Execute `cli`; `argv` (without the program name) is echoed into the
/// run manifest.
pub fn run(cli: &Cli, argv: Vec<String>) -> Result<Outcome> {
    let mut config = PipelineConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        config.set_seed(seed);
    }
    log::info!("{} with seed {}", cli.command.name(), config.seed);

    let (out, outputs, summary) = match &cli.command {
        Command::SynthGen(a) => {
            let out = cli.out.clone().unwrap_or_else(|| config.paths.data_root.clone());
            let mut outputs = Vec::new();
            for i in 0..a.count as u64 {
                let mut spec = PhantomSpec { seed: config.seed + i, ..Default::default() };
                if let Some(n) = a.nodules {
                    spec.nodule_count = n;
                }
                if let Some(n) = a.cube_size {
                    spec.cube_size = n;
                }
                if let Some(f) = a.malignant_fraction {
                    spec.malignant_fraction = f;
                }
                let phantom = generate_phantom(&spec)?;
                write_phantom_bundle(&out.join(spec.series_id()), &phantom, &spec)?;
                outputs.push(spec.series_id());
            }
            config.paths.data_root = out.clone();
            (out, outputs, json!({ "bundles": a.count }))
        }
        Command::Prep(a) => {
            let data = a.data.clone().unwrap_or_else(|| config.paths.data_root.clone());
            if let Some(c) = a.cube {
                config.cube = c;
            }
            if let Some(m) = a.crop_margin {
                config.inference.crop_margin = m;
            }
            let out = cli.out.clone().unwrap_or_else(|| config.paths.output_root.join("prepared"));
            let bundles = if data.is_dir() { discover_bundles(&data)? } else { Vec::new() };
            let summary = prepare_bundles(&bundles, &PreparedLayout::new(&out), config.cube, config.inference.crop_margin)?;
            for w in &summary.warnings {
                log::warn!("{w}");
            }
            write_json(&out.join("prep_summary.json"), &summary)?;
            config.paths.data_root = data;
            (out, vec!["seg".into(), "det".into(), "cls".into(), "prep_summary.json".into()], serde_json::to_value(&summary)?)
        }
        Command::TrainSeg(a) => {
            a.apply(&mut config.train.seg);
            config.validate()?;
            let cases = read_seg_cases(&PreparedLayout::new(prepared_dir(&a.data, &config)))?;
            if cases.is_empty() {
                return Err(Error::EmptyDataset);
            }
            let ckpt = train_segmenter(&seg_training_pairs(&cases, config.seg.input_cube)?, &config.seg, &config.train.seg)?;
            let out = cli.out.clone().unwrap_or_else(|| config.paths.checkpoints.seg.clone());
            ckpt.save(&out)?;
            config.paths.checkpoints.seg = out.clone();
            (out, checkpoint_files(), training_summary(&ckpt.meta))
        }
        Command::TrainDet(DetTrainArgs { train: a, fit_anchors }) => {
            a.apply(&mut config.train.det);
            config.validate()?;
            let samples = read_det_samples(&PreparedLayout::new(prepared_dir(&a.data, &config)))?;
            if samples.is_empty() {
                return Err(Error::EmptyDataset);
            }
            if *fit_anchors {
                config.det.anchors = anchors_from_sizes(&box_sizes(&samples, config.det.input_size), config.seed)?;
                log::info!("fitted anchors {:?}", config.det.anchors);
            }
            let ckpt = train_detector(&samples, &config.det, &config.train.det)?;
            let out = cli.out.clone().unwrap_or_else(|| config.paths.checkpoints.det.clone());
            ckpt.save(&out)?;
            config.paths.checkpoints.det = out.clone();
            (out, checkpoint_files(), training_summary(&ckpt.meta))
        }
        Command::TrainCls(a) => {
            a.apply(&mut config.train.cls);
            config.validate()?;
            let patches = read_patches(&PreparedLayout::new(prepared_dir(&a.data, &config)))?;
            if patches.is_empty() {
                return Err(Error::EmptyDataset);
            }
            let ckpt = train_classifier(&patches, &config.cls, &config.train.cls)?;
            let out = cli.out.clone().unwrap_or_else(|| config.paths.checkpoints.cls.clone());
            ckpt.save(&out)?;
            config.paths.checkpoints.cls = out.clone();
            (out, checkpoint_files(), training_summary(&ckpt.meta))
        }
        Command::EvalSeg(a) => {
            let path = a.checkpoint.clone().unwrap_or_else(|| config.paths.checkpoints.seg.clone());
            let cases = read_seg_cases(&PreparedLayout::new(prepared_dir(&a.data, &config)))?;
            let eval = evaluate_segmentation(&cases, &SegCheckpoint::load(&path)?, config.inference.seg_threshold)?;
            config.paths.checkpoints.seg = path;
            eval_outputs(cli, &config, "eval-seg", serde_json::to_value(eval)?)?
        }
        Command::EvalDet(a) => {
            let path = a.checkpoint.clone().unwrap_or_else(|| config.paths.checkpoints.det.clone());
            let samples = read_det_samples(&PreparedLayout::new(prepared_dir(&a.data, &config)))?;
            let eval = evaluate_detection(&samples, &DetCheckpoint::load(&path)?)?;
            config.paths.checkpoints.det = path;
            eval_outputs(cli, &config, "eval-det", serde_json::to_value(eval)?)?
        }
        Command::EvalCls(a) => {
            let path = a.checkpoint.clone().unwrap_or_else(|| config.paths.checkpoints.cls.clone());
            let patches = read_patches(&PreparedLayout::new(prepared_dir(&a.data, &config)))?;
            if patches.is_empty() {
                return Err(Error::EmptyDataset);
            }
            let eval = evaluate_classification(&patches, &ClsCheckpoint::load(&path)?)?;
            config.paths.checkpoints.cls = path;
            eval_outputs(cli, &config, "eval-cls", serde_json::to_value(eval)?)?
        }
        Command::Infer(a) => {
            if let Some(t) = a.seg_threshold {
                config.inference.seg_threshold = t;
            }
            config.inference.mask_gate &= !a.no_mask_gate;
            config.inference.overlays &= !a.no_overlays;
            config.validate()?;
            let case = run_inference(&a.input, a.mask.as_deref(), &config)?;
            let out = cli.out.clone().unwrap_or_else(|| config.paths.output_root.join(series_id_of(&a.input)));
            let written = write_case_outputs(&out, &case, config.inference.overlays)?;
            let r = &case.report;
            let summary = json!({
                "degenerate": r.degenerate,
                "lung_voxels": r.lung.voxel_count,
                "detections": r.detections.len(),
                "malignant": r.nodules.iter().filter(|n| n.p_malignant > n.p_benign).count(),
            });
            (out, written.iter().map(|p| p.to_string_lossy().into_owned()).collect(), summary)
        }
    };

    let mut manifest = RunManifest::new(cli.command.name(), argv, &config);
    manifest.outputs = outputs.clone();
    manifest.write(&out)?;
    Ok(Outcome { command: cli.command.name().into(), out, outputs, summary })
}

/// Label sizes in letterboxed input pixels.
fn box_sizes(samples: &[DetectionSample], input_size: usize) -> Vec<[f64; 2]> {
    samples
        .iter()
        .flat_map(|s| {
            let (h, w) = s.image.dim();
            let scale = input_size as f64 / h.max(w) as f64;
            s.labels.iter().map(move |l| [l.w * w as f64 * scale, l.h * h as f64 * scale])
        })
        .collect()
}

fn checkpoint_files() -> Vec<String> {
    vec![ctsf_core::train::META_FILE.into(), ctsf_core::train::WEIGHTS_FILE.into()]
}

fn eval_outputs(cli: &Cli, config: &PipelineConfig, name: &str, metrics: Value) -> Result<(PathBuf, Vec<String>, Value)> {
    let out = cli.out.clone().unwrap_or_else(|| config.paths.output_root.join(name));
    write_json(&out.join("metrics.json"), &metrics)?;
    Ok((out, vec!["metrics.json".into()], metrics))
}
