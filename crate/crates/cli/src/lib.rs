//! Command-line front end: data generation, training, adaptation,
//! evaluation, prediction, rendering and the gradient self-check.

pub mod render;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use log::{info, warn};
use rayon::prelude::*;

use gridda::autodiff::AutodiffError;
use gridda::config::{ConfigError, Settings};
use gridda::data::{ingest_kitti, read_labels, synth_dataset, DataError, DatasetManifest, Label, ObjectClass, Sample};
use gridda::eval::{
    ap_vs_iou, ap_vs_iou_tsv, evaluate_kitti_style, evaluate_nuscenes_style, kitti_sweep, EvalError, EvalFrame,
};
use gridda::geometry::{Detection, OrientedBox};
use gridda::gradsuite::{end_to_end_check, primitive_suite, EndToEndConfig, END_TO_END_TOLERANCE, PRIMITIVE_TOLERANCE};
use gridda::gridmap::{read_gridmap, GridError};
use gridda::model::{predict, read_checkpoint, write_checkpoint, DetectorModel, ModelError};
use gridda::train::{TrainError, Trainer};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) | Self::Config(_) | Self::Eval(_) => EXIT_USAGE,
            Self::Numerical(_) => EXIT_NUMERIC,
            Self::Train(
                TrainError::NonFiniteGrad(_)
                | TrainError::NonFiniteLoss(_)
                | TrainError::Autodiff(AutodiffError::NonFinite { .. })
                | TrainError::Model(ModelError::Autodiff(AutodiffError::NonFinite { .. })),
            )
            | Self::Model(ModelError::Autodiff(AutodiffError::NonFinite { .. })) => EXIT_NUMERIC,
            Self::Train(TrainError::Config(_)) | Self::Model(ModelError::Config(_)) => EXIT_USAGE,
            _ => EXIT_DATA,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "gridda", about = "Domain-adaptive object detection on top-view grid maps")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Settings file with `key = value` lines.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one setting; repeatable, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
    /// Seed for data generation and training.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a dataset into OUT (OUT/<split>/ and OUT/<split>.tsv).
    Synth { out: PathBuf },
    /// Convert a KITTI object split (velodyne/, label_2/, calib/) into grid maps.
    IngestKitti { kitti: PathBuf, out: PathBuf },
    /// Source-only training from a manifest.
    Train { source: PathBuf, checkpoint: PathBuf },
    /// Continue training with domain classifiers on source and target data.
    Adapt {
        checkpoint: PathBuf,
        source: PathBuf,
        target: PathBuf,
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a manifest; reports go to OUT_DIR.
    Eval {
        checkpoint: PathBuf,
        manifest: PathBuf,
        out_dir: PathBuf,
    },
    /// Write one detection file per sample to OUT_DIR.
    Predict {
        checkpoint: PathBuf,
        manifest: PathBuf,
        out_dir: PathBuf,
    },
    /// Render a grid map (and optionally labels) to a PPM image.
    Render {
        gridmap: PathBuf,
        /// `[LABELS] OUT`
        #[arg(num_args = 1..=2, required = true)]
        rest: Vec<PathBuf>,
        /// Detection file to overlay.
        #[arg(long)]
        dets: Option<PathBuf>,
    },
    /// Finite-difference check of every primitive and of the full loss.
    CheckGrad,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn make_parent(path: &Path) -> Result<(), CliError> {
    match path.parent().filter(|d| !d.as_os_str().is_empty()) {
        Some(dir) => std::fs::create_dir_all(dir).map_err(io_err(dir)),
        None => Ok(()),
    }
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    make_parent(path)?;
    std::fs::write(path, bytes).map_err(io_err(path))
}

pub fn settings_for(cli: &Cli) -> Result<Settings, CliError> {
    let mut s = Settings::default();
    if let Some(p) = &cli.config {
        s.apply_file(p)?;
    }
    if let Some(seed) = cli.seed {
        s.set_seed(seed);
    }
    for kv in &cli.set {
        s.apply_override(kv)?;
    }
    s.validate()?;
    Ok(s)
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("GRIDDA_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("GRIDDA_THREADS must be a positive integer, got `{v}`")))?;
    // a pool may already exist when run is called more than once in-process
    if rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
        warn!("worker pool already initialised; GRIDDA_THREADS={n} ignored");
    }
    Ok(())
}

/// One line per detection: `class x y w h theta score`.
pub fn format_detections(dets: &[Detection]) -> String {
    let mut s = String::new();
    for d in dets {
        let b = &d.bbox;
        let class = ObjectClass::from_id(d.class_id).map_or("unknown", ObjectClass::name);
        s.push_str(&format!(
            "{class} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6}\n",
            b.x, b.y, b.w, b.h, b.theta, d.score
        ));
    }
    s
}

pub fn parse_detections(text: &str, path: &Path) -> Result<Vec<Detection>, DataError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |detail: String| DataError::Parse {
            path: path.display().to_string(),
            line: i + 1,
            detail,
        };
        let tok: Vec<&str> = line.split_whitespace().collect();
        if tok.len() != 7 {
            return Err(err(format!("expected 7 fields, got {}", tok.len())));
        }
        let class_id = ObjectClass::parse(tok[0])
            .and_then(ObjectClass::id)
            .ok_or_else(|| err(format!("unknown class `{}`", tok[0])))?;
        let mut v = [0.0; 6];
        for (k, t) in tok[1..].iter().enumerate() {
            v[k] = t
                .parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| err(format!("bad number `{t}`")))?;
        }
        let bbox = OrientedBox::new(v[0], v[1], v[2], v[3], v[4]).map_err(|e| err(e.to_string()))?;
        out.push(Detection {
            bbox,
            class_id,
            score: v[5],
        });
    }
    Ok(out)
}

fn load_manifest(path: &Path) -> Result<(DatasetManifest, Vec<Sample>), CliError> {
    let m = DatasetManifest::read(path)?;
    if m.entries.is_empty() {
        return Err(CliError::Data(DataError::Config(format!("{}: empty manifest", path.display()))));
    }
    let samples = m.load_all()?;
    info!("{}: {} samples", path.display(), samples.len());
    Ok((m, samples))
}

fn load_model(s: &Settings, path: &Path) -> Result<DetectorModel, CliError> {
    let ck = read_checkpoint(path)?;
    Ok(Trainer::from_checkpoint(&s.model, &ck, s.train.clone(), s.loss.clone())?.model)
}

fn metrics_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("metrics.tsv")
}

fn predict_all(model: &DetectorModel, samples: &[Sample], s: &Settings) -> Result<Vec<Vec<Detection>>, CliError> {
    let chunks: Vec<Vec<Vec<Detection>>> = samples
        .par_chunks(4)
        .map(|c| {
            let maps: Vec<_> = c.iter().map(|x| &x.gridmap).collect();
            predict(model, &maps, &s.predict)
        })
        .collect::<Result<_, _>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

fn finish_training(t: &Trainer, out: &Path) -> Result<(), CliError> {
    make_parent(out)?;
    write_checkpoint(out, &t.checkpoint())?;
    t.write_metrics(&metrics_path(out))?;
    if let Some((step, r)) = t.history.last() {
        info!("step {step}: total {:.4} det {:.4} da {:.4}", r.total, r.det, r.da);
    }
    info!("wrote {} and {}", out.display(), metrics_path(out).display());
    Ok(())
}

fn execute(cli: &Cli) -> Result<(), CliError> {
    let s = settings_for(cli)?;
    match &cli.command {
        Command::Synth { out } => {
            let m = synth_dataset(out, &s.synth())?;
            info!("wrote {} samples to {}", m.entries.len(), out.join(format!("{}.tsv", m.split)).display());
        }
        Command::IngestKitti { kitti, out } => {
            let (m, frames) = ingest_kitti(
                &kitti.join("velodyne"),
                &kitti.join("label_2"),
                &kitti.join("calib"),
                s.grid,
                out,
                s.data.domain,
            )?;
            for f in frames.iter().filter(|f| f.skipped.is_some()) {
                warn!("skipped frame {}: {}", f.id, f.skipped.as_deref().unwrap_or(""));
            }
            info!("ingested {} frames into {}", m.entries.len(), out.display());
        }
        Command::Train { source, checkpoint } => {
            let (_, pool) = load_manifest(source)?;
            let model = gridda::model::init_model(&s.model, s.train.seed)?;
            info!("{} trainable parameters", model.param_count());
            let mut t = Trainer::new(model, s.train.clone(), s.loss.clone())?;
            t.pretrain(&pool)?;
            finish_training(&t, checkpoint)?;
        }
        Command::Adapt {
            checkpoint,
            source,
            target,
            out,
        } => {
            let ck = read_checkpoint(checkpoint)?;
            let (_, src) = load_manifest(source)?;
            let (_, tgt) = load_manifest(target)?;
            let mut t = Trainer::from_checkpoint(&s.model, &ck, s.train.clone(), s.loss.clone())?;
            t.adapt_domains(&src, &tgt, s.train.adapt_steps)?;
            finish_training(&t, out)?;
        }
        Command::Predict {
            checkpoint,
            manifest,
            out_dir,
        } => {
            let model = load_model(&s, checkpoint)?;
            let (m, samples) = load_manifest(manifest)?;
            let dets = predict_all(&model, &samples, &s)?;
            for (e, d) in m.entries.iter().zip(&dets) {
                let stem = e.gridmap.file_stem().map(PathBuf::from).unwrap_or_default();
                write_file(&out_dir.join(stem.with_extension("txt")), format_detections(d))?;
            }
            info!("wrote {} detection files to {}", dets.len(), out_dir.display());
        }
        Command::Eval {
            checkpoint,
            manifest,
            out_dir,
        } => {
            let model = load_model(&s, checkpoint)?;
            let (_, samples) = load_manifest(manifest)?;
            let dets = predict_all(&model, &samples, &s)?;
            let frames: Vec<EvalFrame> = samples
                .iter()
                .zip(dets)
                .map(|(x, d)| EvalFrame {
                    dets: d,
                    labels: x.labels().to_vec(),
                })
                .collect();
            let kitti = evaluate_kitti_style(&frames, &s.eval)?;
            let nus = evaluate_nuscenes_style(&frames, &s.eval)?;
            let moderate = gridda::data::Difficulty::Moderate;
            let curve = kitti_sweep(&frames, 0, moderate, 0.5).curve;
            write_file(&out_dir.join("kitti.tsv"), kitti.to_tsv())?;
            write_file(&out_dir.join("nuscenes.tsv"), nus.to_tsv())?;
            write_file(&out_dir.join("pr_car_moderate_iou0.5.tsv"), curve.to_tsv())?;
            write_file(&out_dir.join("ap_vs_iou_car_moderate.tsv"), ap_vs_iou_tsv(&ap_vs_iou(&frames, 0, moderate)))?;
            for e in &kitti.entries {
                if let Some(ap) = e.ap {
                    info!("{} {} @{:.2}: AP {ap:.2} ({} gt)", e.class.name(), e.difficulty.name(), e.iou_thr, e.num_gt);
                }
            }
            if let Some(m) = nus.map {
                info!("center-distance mAP {m:.2}");
            }
        }
        Command::Render { gridmap, rest, dets } => {
            let map = read_gridmap(gridmap)?;
            let (labels, out): (Vec<Label>, &PathBuf) = match rest.as_slice() {
                [out] => (Vec::new(), out),
                [labels, out] => (read_labels(labels)?, out),
                _ => return Err(CliError::Usage("render GRIDMAP [LABELS] OUT".into())),
            };
            let dets = match dets {
                Some(p) => parse_detections(&std::fs::read_to_string(p).map_err(io_err(p))?, p)?,
                None => Vec::new(),
            };
            write_file(out, render::render(&map, &labels, &dets).to_ppm())?;
        }
        Command::CheckGrad => {
            let seed = cli.seed.unwrap_or(0);
            let mut worst = 0.0f64;
            let mut failed = false;
            for (name, err) in primitive_suite(seed).map_err(TrainError::from)? {
                let flag = if err < PRIMITIVE_TOLERANCE { "ok" } else { "FAIL" };
                eprintln!("{name:<18} {err:.3e} {flag}");
                worst = worst.max(err);
                failed |= err >= PRIMITIVE_TOLERANCE;
            }
            let e2e = end_to_end_check(&EndToEndConfig {
                seed,
                ..EndToEndConfig::default()
            })?;
            eprintln!("{:<18} {:.3e} ({} coordinates)", "end-to-end", e2e.max_rel_err, e2e.probed);
            worst = worst.max(e2e.max_rel_err);
            failed |= e2e.max_rel_err >= END_TO_END_TOLERANCE;
            println!("max relative error {worst:.3e}");
            if failed {
                return Err(CliError::Numerical(format!("gradient check failed: {worst:.3e}")));
            }
        }
    }
    Ok(())
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return e.exit_code();
    }
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
