//! `pose6d` command line: `eval`, `post`, `ensemble`, `sweep`, `synth`.
//!
//! Exit codes: 0 on success, 1 when a computation fails, 2 for bad input
//! (unknown flags, missing files, parse or validation errors). Reports go
//! to files, summaries to stdout, diagnostics to stderr.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::exec::Exec;
use crate::metrics::{mean_average_precision, ThresholdLadder};
use crate::postprocess::{
    apply_confidence_threshold, ensemble_max, filter_ignore, recover_xy_all, sweep_threshold, EnsembleConfig,
    EnsembleMode, ThresholdSweep, DEFAULT_ENSEMBLE_IOU, DEFAULT_IGNORE_OVERLAP,
};
use crate::records::{
    fill_missing_bboxes, parse_camera, parse_csv_compat, parse_ground_truth, parse_ignore_regions, parse_predictions,
    serialize_camera, serialize_ground_truth, serialize_predictions, GroundTruth, IgnoreRegions, Predictions,
};
use crate::synth::{generate_scene_with, perturb_with, ConfidenceModel, NoiseSpec, SceneSpec};
use crate::CameraIntrinsics;

#[derive(Debug, Parser)]
#[command(name = "pose6d", version, about = "Post-process and evaluate 6D object detections")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Score predictions against ground truth.
    Eval(EvalArgs),
    /// Apply post-processing stages (recover-xy, threshold, ignore) in that order.
    Post(PostArgs),
    /// Merge several models' predictions with max ensembling.
    Ensemble(EnsembleArgs),
    /// Evaluate mAP over a range of confidence thresholds.
    Sweep(SweepArgs),
    /// Write a synthetic scene: gt.jsonl, pred.jsonl and camera.json.
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Jsonl,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Max,
}

#[derive(Debug, Args)]
pub struct PredInput {
    /// Predictions file.
    #[arg(long)]
    pub pred: PathBuf,
    /// Predictions file format; `csv` needs --camera.
    #[arg(long, value_enum, default_value = "jsonl")]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct Parallelism {
    /// Worker threads; 1 runs sequentially, 0 uses all cores.
    #[arg(long, alias = "parallelism", default_value_t = 0)]
    pub jobs: usize,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub input: PredInput,
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub camera: Option<PathBuf>,
    /// JSON ladder: [{"trans_m": .., "rot_deg": ..}, ..]
    #[arg(long)]
    pub ladder: Option<PathBuf>,
    /// Ignore regions; applied to predictions and ground truth.
    #[arg(long)]
    pub ignore: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_IGNORE_OVERLAP)]
    pub ignore_overlap: f64,
    /// Where to write the JSON report.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub parallelism: Parallelism,
}

#[derive(Debug, Args)]
pub struct PostArgs {
    #[command(flatten)]
    pub input: PredInput,
    #[arg(long)]
    pub camera: Option<PathBuf>,
    /// Replace x, y by back-projecting the box center at the predicted depth.
    #[arg(long)]
    pub recover_xy: bool,
    /// Keep detections with confidence >= this value.
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub ignore: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_IGNORE_OVERLAP)]
    pub ignore_overlap: f64,
    /// Output JSONL; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EnsembleArgs {
    /// Prediction files, one per model.
    pub inputs: Vec<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_ENSEMBLE_IOU)]
    pub iou: f64,
    #[arg(long, value_enum, default_value = "max")]
    pub mode: Mode,
    #[arg(long, value_enum, default_value = "jsonl")]
    pub format: Format,
    #[arg(long)]
    pub camera: Option<PathBuf>,
    /// Output JSONL; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub input: PredInput,
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub camera: Option<PathBuf>,
    #[arg(long)]
    pub ladder: Option<PathBuf>,
    #[arg(long, default_value_t = 0.1)]
    pub lo: f64,
    #[arg(long, default_value_t = 0.8)]
    pub hi: f64,
    #[arg(long, default_value_t = 0.05)]
    pub step: f64,
    /// Curve CSV; printed to stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub parallelism: Parallelism,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 10)]
    pub images: usize,
    #[arg(long, default_value_t = 1)]
    pub min_objects: usize,
    #[arg(long, default_value_t = 5)]
    pub max_objects: usize,
    #[arg(long, default_value_t = 5.0)]
    pub depth_min: f64,
    #[arg(long, default_value_t = 60.0)]
    pub depth_max: f64,
    #[arg(long, default_value_t = 1)]
    pub classes: u32,
    #[arg(long, default_value_t = 0.2)]
    pub trans_sigma: f64,
    #[arg(long, default_value_t = 0.03)]
    pub rot_sigma: f64,
    #[arg(long, default_value_t = 0.2)]
    pub fp_rate: f64,
    #[arg(long, default_value_t = 0.1)]
    pub miss_rate: f64,
    /// Emit predictions identical to the ground truth (confidence 1).
    #[arg(long)]
    pub zero_noise: bool,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
    #[command(flatten)]
    pub parallelism: Parallelism,
}

#[derive(Debug)]
enum CliError {
    Input(String),
    Compute(String),
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 2,
            CliError::Compute(_) => 1,
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn input_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Input(format!("{}: {e}", path.display()))
}

fn require_files<'a>(paths: impl IntoIterator<Item = &'a Path>) -> CliResult<()> {
    for p in paths {
        if !p.is_file() {
            return Err(CliError::Input(format!("{}: no such file", p.display())));
        }
    }
    Ok(())
}

fn open(path: &Path) -> CliResult<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| input_err(path, e))
}

fn load_camera(path: &Path) -> CliResult<CameraIntrinsics> {
    parse_camera(open(path)?).map_err(|e| input_err(path, e))
}

fn load_predictions(path: &Path, format: Format, camera: Option<&CameraIntrinsics>) -> CliResult<Predictions> {
    match format {
        Format::Jsonl => parse_predictions(open(path)?).map_err(|e| input_err(path, e)),
        Format::Csv => {
            let k = camera.ok_or_else(|| CliError::Input("--format csv requires --camera".into()))?;
            parse_csv_compat(open(path)?, k).map_err(|e| input_err(path, e))
        }
    }
}

fn load_gt(path: &Path) -> CliResult<GroundTruth> {
    parse_ground_truth(open(path)?).map_err(|e| input_err(path, e))
}

fn load_ignore(path: &Path) -> CliResult<Vec<IgnoreRegions>> {
    parse_ignore_regions(open(path)?).map_err(|e| input_err(path, e))
}

fn load_ladder(path: Option<&Path>) -> CliResult<ThresholdLadder> {
    match path {
        None => Ok(ThresholdLadder::default()),
        Some(p) => ThresholdLadder::from_json(open(p)?).map_err(|e| input_err(p, e)),
    }
}

fn check_fraction(name: &str, v: f64) -> CliResult<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(CliError::Input(format!("--{name} must lie in [0, 1], got {v}")))
    }
}

fn write_output(path: Option<&Path>, write: impl FnOnce(&mut dyn Write) -> std::io::Result<()>) -> CliResult<()> {
    let res = match path {
        Some(p) => File::create(p).and_then(|f| {
            let mut w = BufWriter::new(f);
            write(&mut w)?;
            w.flush()
        }),
        None => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            write(&mut lock)
        }
    };
    res.map_err(|e| CliError::Compute(format!("write failed: {e}")))
}

fn optional_paths<'a>(paths: &'a [&'a Option<PathBuf>]) -> impl Iterator<Item = &'a Path> {
    paths.iter().filter_map(|p| p.as_deref())
}

fn cmd_eval(a: &EvalArgs) -> CliResult<()> {
    require_files(
        [a.input.pred.as_path(), a.gt.as_path()]
            .into_iter()
            .chain(optional_paths(&[&a.camera, &a.ladder, &a.ignore])),
    )?;
    check_fraction("ignore-overlap", a.ignore_overlap)?;
    let camera = a.camera.as_deref().map(load_camera).transpose()?;
    let ladder = load_ladder(a.ladder.as_deref())?;
    let mut preds = load_predictions(&a.input.pred, a.input.format, camera.as_ref())?;
    let mut gt = load_gt(&a.gt)?;
    if let Some(path) = &a.ignore {
        let regions = load_ignore(path)?;
        if let Some(k) = &camera {
            fill_missing_bboxes(&mut gt, k).map_err(|e| CliError::Compute(e.to_string()))?;
        }
        preds = filter_ignore(&preds, &regions, a.ignore_overlap);
        gt = filter_ignore(&gt, &regions, a.ignore_overlap);
    }
    let report = mean_average_precision(&preds, &gt, &ladder, Exec::from_jobs(a.parallelism.jobs))
        .map_err(|e| CliError::Compute(e.to_string()))?;
    print!("{}", report.to_table());
    if let Some(out) = &a.out {
        write_output(Some(out), |w| w.write_all(report.to_json().as_bytes()))?;
    }
    Ok(())
}

fn cmd_post(a: &PostArgs) -> CliResult<()> {
    require_files([a.input.pred.as_path()].into_iter().chain(optional_paths(&[&a.camera, &a.ignore])))?;
    check_fraction("ignore-overlap", a.ignore_overlap)?;
    if let Some(t) = a.threshold {
        check_fraction("threshold", t)?;
    }
    let camera = a.camera.as_deref().map(load_camera).transpose()?;
    let mut preds = load_predictions(&a.input.pred, a.input.format, camera.as_ref())?;
    if a.recover_xy {
        let k = camera.as_ref().ok_or_else(|| CliError::Input("--recover-xy requires --camera".into()))?;
        preds = recover_xy_all(&preds, k).map_err(|e| CliError::Compute(e.to_string()))?;
    }
    if let Some(t) = a.threshold {
        preds = apply_confidence_threshold(&preds, t);
    }
    if let Some(path) = &a.ignore {
        preds = filter_ignore(&preds, &load_ignore(path)?, a.ignore_overlap);
    }
    write_output(a.out.as_deref(), |w| serialize_predictions(&preds, w))
}

fn cmd_ensemble(a: &EnsembleArgs) -> CliResult<()> {
    if a.inputs.is_empty() {
        return Err(CliError::Input("ensemble needs at least one input file".into()));
    }
    require_files(a.inputs.iter().map(PathBuf::as_path).chain(optional_paths(&[&a.camera])))?;
    let cfg = EnsembleConfig::new(
        a.iou,
        match a.mode {
            Mode::Max => EnsembleMode::Max,
        },
    )
    .map_err(|e| CliError::Input(e.to_string()))?;
    let camera = a.camera.as_deref().map(load_camera).transpose()?;
    let models = a
        .inputs
        .iter()
        .map(|p| load_predictions(p, a.format, camera.as_ref()))
        .collect::<CliResult<Vec<_>>>()?;
    let merged = ensemble_max(&models, &cfg).map_err(|e| CliError::Compute(e.to_string()))?;
    write_output(a.out.as_deref(), |w| serialize_predictions(&merged, w))
}

fn cmd_sweep(a: &SweepArgs) -> CliResult<()> {
    require_files(
        [a.input.pred.as_path(), a.gt.as_path()]
            .into_iter()
            .chain(optional_paths(&[&a.camera, &a.ladder])),
    )?;
    let sweep = ThresholdSweep::new(a.lo, a.hi, a.step).map_err(|e| CliError::Input(e.to_string()))?;
    let camera = a.camera.as_deref().map(load_camera).transpose()?;
    let ladder = load_ladder(a.ladder.as_deref())?;
    let preds = load_predictions(&a.input.pred, a.input.format, camera.as_ref())?;
    let gt = load_gt(&a.gt)?;
    let res = sweep_threshold(&preds, &gt, &sweep, &ladder, Exec::from_jobs(a.parallelism.jobs))
        .map_err(|e| CliError::Compute(e.to_string()))?;
    let csv = res.to_csv();
    match &a.out {
        Some(p) => write_output(Some(p), |w| w.write_all(csv.as_bytes()))?,
        None => print!("{csv}"),
    }
    println!("best_threshold {:.4} mAP {:.6}", res.best_threshold, res.best_map);
    Ok(())
}

fn cmd_synth(a: &SynthArgs) -> CliResult<()> {
    let noise = if a.zero_noise {
        NoiseSpec::zero()
    } else {
        NoiseSpec {
            trans_sigma: a.trans_sigma,
            rot_sigma: a.rot_sigma,
            confidence: ConfidenceModel::default(),
            fp_rate: a.fp_rate,
            miss_rate: a.miss_rate,
        }
    };
    let spec = SceneSpec {
        seed: a.seed,
        n_images: a.images,
        objects_per_image: (a.min_objects, a.max_objects),
        depth_range: (a.depth_min, a.depth_max),
        n_classes: a.classes,
        noise,
        ..SceneSpec::default()
    };
    let exec = Exec::from_jobs(a.parallelism.jobs);
    let (gt, camera) = generate_scene_with(&spec, exec).map_err(|e| CliError::Input(e.to_string()))?;
    let preds = perturb_with(&gt, &spec, exec).map_err(|e| CliError::Input(e.to_string()))?;
    std::fs::create_dir_all(&a.out_dir).map_err(|e| input_err(&a.out_dir, e))?;
    write_output(Some(&a.out_dir.join("gt.jsonl")), |w| serialize_ground_truth(&gt, w))?;
    write_output(Some(&a.out_dir.join("pred.jsonl")), |w| serialize_predictions(&preds, w))?;
    write_output(Some(&a.out_dir.join("camera.json")), |w| serialize_camera(&camera, w))?;
    println!(
        "wrote {} images, {} annotations, {} detections to {}",
        gt.len(),
        gt.iter().map(|r| r.items.len()).sum::<usize>(),
        preds.iter().map(|r| r.items.len()).sum::<usize>(),
        a.out_dir.display()
    );
    Ok(())
}

/// Parses `args` (including the program name) and runs the subcommand.
/// Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let result = match &cli.command {
        Command::Eval(a) => cmd_eval(a),
        Command::Post(a) => cmd_post(a),
        Command::Ensemble(a) => cmd_ensemble(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Synth(a) => cmd_synth(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            match &e {
                CliError::Input(m) => eprintln!("error: {m}"),
                CliError::Compute(m) => eprintln!("error: evaluation failed: {m}"),
            }
            e.exit_code()
        }
    }
}
