//! Command-line front end. Exit codes: 0 success, 2 usage or validation
//! failure, 3 numeric failure.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::io::{self, PredictionRecord, PredictionsFile, PseudoLabelFile, RegulationSummary, RunManifest};
use crate::pipeline::{
    self, ablate, build_prior, evaluate_predictions, predict, Ablation, BenchmarkSizes, Metrics, RunLog, RunStatus,
    TrainConfig, TrainState,
};
use crate::regulation::{regulate, DEFAULT_Z_MM};
use crate::shape_model::{fit_shape_model, shapiro_wilk, ShapeModel, DEFAULT_VARIANCE_TARGET};
use crate::synth::{generate_range, GeneratorSpec};

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "shapereg", version, about = "Shape-regulated self-training for landmark detection")]
pub struct Cli {
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    pub verbose: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic landmark dataset.
    Synth(SynthArgs),
    /// Build the PCA shape prior from labeled landmarks.
    BuildModel(BuildModelArgs),
    /// Regulate predicted landmarks into pseudo labels.
    Regulate(RegulateArgs),
    /// Run pre-training, self-training and fine-tuning.
    Train(TrainArgs),
    /// Predict landmarks for a dataset with a trained checkpoint.
    Predict(PredictArgs),
    /// Score a checkpoint or a predictions file on a labeled test set.
    Eval(EvalArgs),
    /// Run every ablation arm over several seeds on fresh synthetic benchmarks.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Index of the first sample; disjoint ranges give disjoint splits.
    #[arg(long, default_value_t = 0)]
    pub start: u64,
    #[arg(long, default_value = "samples")]
    pub name: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BuildModelArgs {
    #[arg(long)]
    pub labeled: PathBuf,
    #[arg(long, default_value_t = DEFAULT_VARIANCE_TARGET)]
    pub variance_target: f64,
    /// Shape model JSON; the diagnostic report goes next to it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RegulateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub predictions: PathBuf,
    #[arg(long, default_value_t = DEFAULT_Z_MM)]
    pub z_mm: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub labeled: PathBuf,
    #[arg(long)]
    pub unlabeled: Option<PathBuf>,
    #[arg(long)]
    pub held_out: Option<PathBuf>,
    /// JSON file mirroring the training configuration; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<u32>,
    #[arg(long)]
    pub ablation: Option<Ablation>,
    #[arg(long)]
    pub z_mm: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Continue from a checkpoint; its stored configuration is used.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Stop cleanly after this many epochs, leaving a resumable checkpoint.
    #[arg(long)]
    pub halt_after_epochs: Option<u32>,
    #[arg(long, default_value_t = 10)]
    pub checkpoint_every: u32,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub images: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long, conflicts_with = "predictions", required_unless_present = "predictions")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub radii_mm: Option<Vec<f64>>,
    /// Metrics JSON output.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
    pub seeds: Vec<u64>,
    #[arg(long, value_delimiter = ',')]
    pub arms: Option<Vec<Ablation>>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<u32>,
    #[arg(long, default_value_t = 20)]
    pub labeled: usize,
    #[arg(long, default_value_t = 200)]
    pub unlabeled: usize,
    #[arg(long, default_value_t = 50)]
    pub held_out: usize,
    #[arg(long, default_value_t = 100)]
    pub test: usize,
    #[arg(long)]
    pub out: PathBuf,
}

impl clap::ValueEnum for Ablation {
    fn value_variants<'a>() -> &'a [Self] {
        &Ablation::ALL
    }

    fn to_possible_value(&self) -> Option<clap::builder::PossibleValue> {
        Some(clap::builder::PossibleValue::new(self.name()))
    }
}

/// Maps an error to the process exit code.
pub fn exit_code(err: &Error) -> i32 {
    if err.is_numeric() {
        EXIT_NUMERIC
    } else {
        EXIT_USAGE
    }
}

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}.json"))
}

fn parent_dir(path: &Path) -> Result<()> {
    if let Some(p) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(p)?;
    }
    Ok(())
}

fn manifest(command: &str, out_dir: &Path, inputs: &[&Path], parameters: serde_json::Value) -> RunManifest {
    RunManifest {
        inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
        parameters,
        ..RunManifest::new(command, out_dir)
    }
}

pub fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        // Only the first configuration in a process takes effect.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::BuildModel(a) => cmd_build_model(&a),
        Command::Regulate(a) => cmd_regulate(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Predict(a) => cmd_predict(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Ablate(a) => cmd_ablate(&a),
    }
}

pub fn cmd_synth(a: &SynthArgs) -> Result<()> {
    if a.count == 0 {
        return Err(Error::InvalidInput("--count must be at least 1".into()));
    }
    let spec = GeneratorSpec::default_with_seed(a.seed);
    let samples = generate_range(&spec, a.start, a.count)?;
    std::fs::create_dir_all(&a.out)?;
    let path = io::write_dataset(&a.out, &a.name, Some(&spec), &samples)?;
    let mut m = manifest(
        "synth",
        &a.out,
        &[],
        serde_json::json!({"count": a.count, "start": a.start, "name": a.name}),
    );
    m.seed = Some(a.seed);
    io::write_json(&sidecar(&path, "manifest"), &m)?;
    println!("wrote {} samples to {}", a.count, path.display());
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct ModeReport {
    pub mode: usize,
    pub sigma: f64,
    pub explained_variance: f64,
    pub cumulative_variance: f64,
    pub shapiro_w: Option<f64>,
    pub shapiro_p: Option<f64>,
}

#[derive(Debug, Serialize)]
pub struct ModelReport {
    pub n_train: usize,
    pub n_landmarks: usize,
    pub n_components: usize,
    pub variance_target: f64,
    pub variance_fraction: f64,
    pub gpa_converged: bool,
    pub modes: Vec<ModeReport>,
}

pub fn cmd_build_model(a: &BuildModelArgs) -> Result<()> {
    let labeled = io::read_labeled(&a.labeled)?;
    let sets: Vec<_> = labeled.into_iter().map(|s| s.landmarks).collect();
    let fit = fit_shape_model(&sets, a.variance_target)?;
    let model = &fit.model;
    let mut cumulative = 0.0;
    let modes = (0..model.n_components())
        .map(|k| {
            cumulative += fit.explained_ratio[k];
            let coeffs: Vec<f64> = fit.training_coefficients.iter().map(|c| c[k]).collect();
            let sw = shapiro_wilk(&coeffs).ok();
            ModeReport {
                mode: k + 1,
                sigma: model.sigmas()[k],
                explained_variance: fit.explained_ratio[k],
                cumulative_variance: cumulative,
                shapiro_w: sw.map(|s| s.w),
                shapiro_p: sw.map(|s| s.p_value),
            }
        })
        .collect();
    let report = ModelReport {
        n_train: model.n_train(),
        n_landmarks: model.n_landmarks(),
        n_components: model.n_components(),
        variance_target: a.variance_target,
        variance_fraction: model.variance_fraction(),
        gpa_converged: fit.gpa_converged,
        modes,
    };
    parent_dir(&a.out)?;
    std::fs::write(&a.out, model.to_json()?)?;
    io::write_json(&sidecar(&a.out, "report"), &report)?;
    let m = manifest(
        "build-model",
        a.out.parent().unwrap_or(Path::new(".")),
        &[&a.labeled],
        serde_json::json!({"variance_target": a.variance_target}),
    );
    io::write_json(&sidecar(&a.out, "manifest"), &m)?;
    println!(
        "{} modes retain {:.4}% of variance (target {:.4}%)",
        report.n_components,
        100.0 * report.variance_fraction,
        100.0 * a.variance_target
    );
    for mode in &report.modes {
        println!(
            "  mode {:>2}: sigma {:.6}  explained {:.6}  Shapiro-Wilk W {}  p {}",
            mode.mode,
            mode.sigma,
            mode.explained_variance,
            mode.shapiro_w.map_or("n/a".into(), |w| format!("{w:.4}")),
            mode.shapiro_p.map_or("n/a".into(), |p| format!("{p:.4}")),
        );
    }
    Ok(())
}

fn load_model(path: &Path) -> Result<ShapeModel> {
    ShapeModel::from_json(&std::fs::read_to_string(path)?)
}

pub fn cmd_regulate(a: &RegulateArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let preds: PredictionsFile = io::read_json(&a.predictions)?;
    let labels = preds
        .landmark_sets()?
        .iter()
        .map(|x| regulate(&model, x, a.z_mm))
        .collect::<Result<Vec<_>>>()?;
    let summary = RegulationSummary::of(&labels);
    parent_dir(&a.out)?;
    io::write_json(&a.out, &PseudoLabelFile { version: io::FORMAT_VERSION, z_mm: a.z_mm, summary, labels })?;
    let m = manifest(
        "regulate",
        a.out.parent().unwrap_or(Path::new(".")),
        &[&a.model, &a.predictions],
        serde_json::json!({"z_mm": a.z_mm}),
    );
    io::write_json(&sidecar(&a.out, "manifest"), &m)?;
    println!(
        "adjusted {}  raw-with-exclusions {}  fully excluded {}  (Z = {} mm)",
        summary.adjusted, summary.raw_with_exclusions, summary.fully_excluded, a.z_mm
    );
    Ok(())
}

fn train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg: TrainConfig = match &a.config {
        Some(p) => io::read_json(p)?,
        None => TrainConfig::default(),
    };
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.epochs {
        cfg.epochs_per_stage = v;
    }
    if let Some(v) = a.ablation {
        cfg.ablation = v;
    }
    if let Some(v) = a.z_mm {
        cfg.z_mm = v;
    }
    if let Some(v) = a.lr {
        cfg.adam.lr = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LOG_FILE: &str = "run_log.ndjson";
pub const TRAJECTORY_FILE: &str = "trajectories.ndjson";

fn persist(out: &Path, cfg: &TrainConfig, state: &TrainState, log: &mut RunLog) -> Result<()> {
    io::save_checkpoint(&out.join(CHECKPOINT_FILE), cfg, state)?;
    io::append_log_records(&out.join(LOG_FILE), &log.records)?;
    let mut buf = String::new();
    for t in &log.trajectories {
        buf.push_str(&serde_json::to_string(t)?);
        buf.push('\n');
    }
    if !buf.is_empty() {
        use std::io::Write;
        std::fs::OpenOptions::new().create(true).append(true).open(out.join(TRAJECTORY_FILE))?.write_all(buf.as_bytes())?;
    }
    log.records.clear();
    log.trajectories.clear();
    Ok(())
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let (cfg, mut state) = match &a.resume {
        Some(path) => {
            let ck = io::load_checkpoint(path)?;
            (ck.config, ck.state)
        }
        None => {
            let cfg = train_config(a)?;
            let n = io::read_labeled(&a.labeled)?.first().map_or(0, |s| s.landmarks.len());
            let state = TrainState::new(n, &cfg)?;
            (cfg, state)
        }
    };
    let data = io::load_training_data(&a.labeled, a.unlabeled.as_deref(), a.held_out.as_deref())?;
    if state.params.config().n_landmarks != data.n_landmarks() {
        return Err(Error::ShapeMismatch("checkpoint and data disagree on landmark count".into()));
    }
    std::fs::create_dir_all(&a.out)?;
    if a.resume.is_none() {
        for f in [LOG_FILE, TRAJECTORY_FILE] {
            let p = a.out.join(f);
            if p.exists() {
                std::fs::remove_file(p)?;
            }
        }
    }
    let model = build_prior(&data, &cfg)?;
    if let Some(m) = &model {
        std::fs::write(a.out.join("shape_model.json"), m.to_json()?)?;
    }
    let mut inputs: Vec<&Path> = vec![&a.labeled];
    inputs.extend(a.unlabeled.as_deref());
    inputs.extend(a.held_out.as_deref());
    let mut m = manifest("train", &a.out, &inputs, serde_json::json!({"resumed": a.resume.is_some()}));
    m.seed = Some(cfg.seed);
    m.config = Some(cfg.clone());
    io::write_json(&a.out.join("run_manifest.json"), &m)?;

    let mut log = RunLog::default();
    let mut epochs_run = 0u32;
    let status = loop {
        if state.is_complete(&cfg) {
            break RunStatus::Completed;
        }
        if a.halt_after_epochs.is_some_and(|h| epochs_run >= h) {
            break RunStatus::Halted;
        }
        pipeline::train_epoch(&data, model.as_ref(), &cfg, &mut state, &mut log)?;
        epochs_run += 1;
        if a.checkpoint_every > 0 && epochs_run.is_multiple_of(a.checkpoint_every) {
            persist(&a.out, &cfg, &state, &mut log)?;
        }
    };
    persist(&a.out, &cfg, &state, &mut log)?;
    match status {
        RunStatus::Completed => println!("training complete ({} arm); checkpoint in {}", cfg.ablation, a.out.display()),
        RunStatus::Halted => println!("halted after {epochs_run} epochs; resume with --resume {}", a.out.join(CHECKPOINT_FILE).display()),
    }
    Ok(())
}

pub fn cmd_predict(a: &PredictArgs) -> Result<()> {
    let ck = io::load_checkpoint(&a.checkpoint)?;
    let samples = io::read_dataset(&a.images)?;
    let images: Vec<&Grid> = samples.iter().map(|s| &s.image).collect();
    let preds = predict(&ck.state.params, &images)?;
    let file = PredictionsFile {
        version: io::FORMAT_VERSION,
        predictions: preds
            .into_iter()
            .zip(&samples)
            .map(|(coords, s)| PredictionRecord { coords, spacing_mm: s.spacing_mm })
            .collect(),
    };
    parent_dir(&a.out)?;
    io::write_json(&a.out, &file)?;
    println!("wrote {} predictions to {}", file.predictions.len(), a.out.display());
    Ok(())
}

/// MRE (SD) and outlier percentages in the column order of the paper's tables.
pub fn metrics_table(label: &str, m: &Metrics) -> String {
    let mut head = format!("{:<16} {:>16}", "", "MRE (SD) mm");
    let mut row = format!("{:<16} {:>16}", label, format!("{:.4} ({:.4})", m.mre_mm, m.sd_mm));
    for o in &m.outliers {
        let _ = write!(head, " {:>8}", format!("{}mm", o.radius_mm));
        let _ = write!(row, " {:>7.2}%", o.percent);
    }
    format!("{head}\n{row}\n")
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let test = io::read_labeled(&a.test)?;
    let (preds, radii) = match (&a.checkpoint, &a.predictions) {
        (Some(c), _) => {
            let ck = io::load_checkpoint(c)?;
            let images: Vec<&Grid> = test.iter().map(|s| &s.image).collect();
            (predict(&ck.state.params, &images)?, ck.config.outlier_radii_mm)
        }
        (None, Some(p)) => {
            let file: PredictionsFile = io::read_json(p)?;
            (file.predictions.into_iter().map(|r| r.coords).collect(), pipeline::DEFAULT_OUTLIER_RADII_MM.to_vec())
        }
        (None, None) => return Err(Error::InvalidInput("give --checkpoint or --predictions".into())),
    };
    let radii = a.radii_mm.clone().unwrap_or(radii);
    let truth: Vec<_> = test.iter().map(|s| s.landmarks.clone()).collect();
    let metrics = evaluate_predictions(&preds, &truth, &radii)?;
    if let Some(out) = &a.out {
        parent_dir(out)?;
        io::write_json(out, &metrics)?;
    }
    print!("{}", metrics_table("test", &metrics));
    Ok(())
}

pub fn cmd_ablate(a: &AblateArgs) -> Result<()> {
    let mut cfg: TrainConfig = match &a.config {
        Some(p) => io::read_json(p)?,
        None => TrainConfig::desk(0, Ablation::Full),
    };
    if let Some(e) = a.epochs {
        cfg.epochs_per_stage = e;
    }
    cfg.validate()?;
    if a.seeds.is_empty() {
        return Err(Error::InvalidInput("need at least one seed".into()));
    }
    let arms = a.arms.clone().unwrap_or_else(|| Ablation::ALL.to_vec());
    let sizes = BenchmarkSizes { labeled: a.labeled, unlabeled: a.unlabeled, held_out: a.held_out, test: a.test };
    let report = ablate(sizes, &a.seeds, &cfg, &arms)?;
    std::fs::create_dir_all(&a.out)?;
    // Wall-clock time is the only non-reproducible field; keep it out of the report.
    let mut stable = report.clone();
    stable.outcomes.iter_mut().for_each(|o| o.seconds = 0.0);
    io::write_json(&a.out.join("ablation.json"), &stable)?;
    let table = report.table();
    std::fs::write(a.out.join("ablation_table.txt"), &table)?;
    let mut m = manifest("ablate", &a.out, &[], serde_json::json!({"seeds": a.seeds, "arms": arms, "sizes": sizes}));
    m.config = Some(cfg);
    io::write_json(&a.out.join("run_manifest.json"), &m)?;
    print!("{table}");
    Ok(())
}
