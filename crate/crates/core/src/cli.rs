//! Command-line front end. Every subcommand that writes artifacts also writes
//! a JSON run manifest beside them. Usage problems exit with 2, runtime
//! failures with 1, and either way a single diagnostic line goes to stderr.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use crate::data::{
    generate_synthetic_dataset, load_board, load_dataset, load_split, make_cv_splits, save_dataset,
    save_split, BatchMode, Dataset, ExtraMode, Fold, SyntheticConfig, TemplateStrategy,
};
use crate::error::Error;
use crate::eval::{evaluate_classification, predict, run_pipeline_eval, TemplatePlan};
use crate::model::{gradcheck, BlockKind, LossKind};
use crate::similarity::SimilarityMetric;
use crate::train::{run_training, write_metrics_csv, Checkpoint, TrainConfig};

/// Relative error below which `gradcheck` succeeds.
pub const GRADCHECK_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Parser)]
#[command(
    name = "boardgraph",
    version,
    about = "Low-shot PCB component classification with board graphs"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic board dataset.
    Gen(GenArgs),
    /// Write cross-validation folds that respect category coverage.
    Split(SplitArgs),
    /// Train one model on one fold.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test boards of a fold.
    Eval(EvalArgs),
    /// Detect and classify the components of a single board.
    Predict(PredictArgs),
    /// Compare analytic gradients with central finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
struct GenArgs {
    #[arg(long, default_value_t = 60)]
    boards: usize,
    #[arg(long, default_value_t = 12)]
    classes: usize,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    sigma_board: Option<f64>,
    #[arg(long)]
    sigma_inst: Option<f64>,
    /// Norm of the per-board colour cast.
    #[arg(long)]
    offset_scale: Option<f64>,
    /// Skip the synthetic detector proposals.
    #[arg(long)]
    no_proposals: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SplitArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 3)]
    folds: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Cap each test set at this share of the boards.
    #[arg(long)]
    test_fraction: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    split: PathBuf,
    #[arg(long)]
    fold: usize,
    #[arg(long, value_enum, default_value_t = BlockKind::Gn)]
    block: BlockKind,
    #[arg(long, value_enum, default_value_t = LossKind::Triplet)]
    loss: LossKind,
    #[arg(long, value_enum, default_value_t = BatchMode::Within)]
    batching: BatchMode,
    #[arg(long, value_enum, default_value_t = ExtraMode::None)]
    extra: ExtraMode,
    #[arg(long, default_value_t = 500)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    lr: Option<f64>,
    /// Number of stacked refinement blocks.
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long, value_enum)]
    metric: Option<SimilarityMetric>,
    /// Iterations per epoch; defaults to the number of training boards.
    #[arg(long)]
    iterations: Option<usize>,
    /// Final checkpoint; the best one and the metrics log go beside it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum EvalMode {
    Classification,
    Pipeline,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    split: PathBuf,
    #[arg(long)]
    fold: usize,
    #[arg(long)]
    model: PathBuf,
    #[arg(long, value_enum, default_value_t = EvalMode::Classification)]
    mode: EvalMode,
    #[arg(long, value_enum, default_value_t = TemplateStrategy::RandomOnBoard)]
    templates: TemplateStrategy,
    /// Proposals scoring below this are dropped.
    #[arg(long, default_value_t = 0.3)]
    threshold: f64,
    /// Seed for random template draws.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[arg(long)]
    board: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// Only on-board templates are available without a training set.
    #[arg(long, value_enum, default_value_t = TemplateStrategy::RandomOnBoard)]
    templates: TemplateStrategy,
    #[arg(long, default_value_t = 0.3)]
    threshold: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 6)]
    nodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = BlockKind::Gn)]
    block: BlockKind,
    #[arg(long, value_enum, default_value_t = LossKind::Triplet)]
    loss: LossKind,
    #[arg(long, default_value_t = 1e-4)]
    eps: f64,
}

/// Provenance record written next to every output.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: Vec<String>,
    pub config: serde_json::Value,
    pub seed: u64,
    pub artifacts: Vec<String>,
    pub wall_clock_seconds: f64,
    pub version: String,
}

enum CliError {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Runtime(e)
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    0
                }
                _ => {
                    eprintln!("{}", first_line(&e.to_string()));
                    2
                }
            };
        }
    };
    let command: Vec<String> = argv
        .iter()
        .map(|a| a.to_string_lossy().into_owned())
        .collect();
    match execute(cli.command, &command) {
        Ok(code) => code,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {}", first_line(&msg));
            2
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {}", first_line(&e.to_string()));
            1
        }
    }
}

fn first_line(s: &str) -> String {
    s.lines()
        .map(str::trim)
        .find(|l| !l.is_empty())
        .unwrap_or("failed")
        .to_string()
}

fn execute(command: Command, argv: &[String]) -> CliResult<i32> {
    let start = Instant::now();
    match command {
        Command::Gen(a) => gen(a, argv, start),
        Command::Split(a) => split(a, argv, start),
        Command::Train(a) => train(a, argv, start),
        Command::Eval(a) => eval(a, argv, start),
        Command::Predict(a) => predict_cmd(a, argv, start),
        Command::Gradcheck(a) => gradcheck_cmd(a),
    }
}

fn require(path: &Path) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Usage(format!(
            "{}: no such file or directory",
            path.display()
        )))
    }
}

/// `dir/name.json` → `dir/name.<tag>`.
fn sibling(path: &Path, tag: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("out");
    path.with_file_name(format!("{stem}.{tag}"))
}

/// Writes through a temporary file in the same directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> crate::Result<()> {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn ensure_parent(path: &Path) -> crate::Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => fs::create_dir_all(p).map_err(|e| Error::io(p, e)),
        _ => Ok(()),
    }
}

fn write_manifest(
    path: &Path,
    argv: &[String],
    config: serde_json::Value,
    seed: u64,
    artifacts: &[PathBuf],
    start: Instant,
) -> crate::Result<()> {
    let manifest = RunManifest {
        command: argv.to_vec(),
        config,
        seed,
        artifacts: artifacts.iter().map(|p| p.display().to_string()).collect(),
        wall_clock_seconds: start.elapsed().as_secs_f64(),
        version: env!("CARGO_PKG_VERSION").to_string(),
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn fold_of(split_path: &Path, index: usize) -> CliResult<Fold> {
    let split = load_split(split_path)?;
    let n = split.folds.len();
    split.folds.into_iter().nth(index).ok_or_else(|| {
        CliError::Usage(format!(
            "fold {index} out of range; the split has {n} folds"
        ))
    })
}

fn gen(a: GenArgs, argv: &[String], start: Instant) -> CliResult<i32> {
    let defaults = SyntheticConfig::default();
    let cfg = SyntheticConfig {
        n_boards: a.boards,
        n_categories: a.classes,
        feature_dim: a.dim,
        sigma_board: a.sigma_board.unwrap_or(defaults.sigma_board),
        sigma_inst: a.sigma_inst.unwrap_or(defaults.sigma_inst),
        offset_scale: a.offset_scale.unwrap_or(defaults.offset_scale),
        proposals: if a.no_proposals {
            None
        } else {
            defaults.proposals.clone()
        },
        seed: a.seed,
        ..defaults
    };
    let ds = generate_synthetic_dataset(&cfg)?;
    let paths = save_dataset(&a.out, &ds)?;
    write_manifest(
        &a.out.join("manifest.json"),
        argv,
        serde_json::to_value(&cfg).map_err(Error::from)?,
        a.seed,
        &paths,
        start,
    )?;
    println!("wrote {} boards to {}", paths.len(), a.out.display());
    Ok(0)
}

fn split(a: SplitArgs, argv: &[String], start: Instant) -> CliResult<i32> {
    require(&a.data)?;
    let ds = load_dataset(&a.data)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let split = make_cv_splits(&ds, a.folds, a.test_fraction, &mut rng)?;
    ensure_parent(&a.out)?;
    save_split(&a.out, &split)?;
    write_manifest(
        &sibling(&a.out, "manifest.json"),
        argv,
        json!({ "data": a.data, "folds": a.folds, "test_fraction": a.test_fraction }),
        a.seed,
        std::slice::from_ref(&a.out),
        start,
    )?;
    for (k, f) in split.folds.iter().enumerate() {
        println!("fold {k}: {} train, {} test", f.train.len(), f.test.len());
    }
    Ok(0)
}

fn train(a: TrainArgs, argv: &[String], start: Instant) -> CliResult<i32> {
    require(&a.data)?;
    require(&a.split)?;
    let ds = load_dataset(&a.data)?;
    let fold = fold_of(&a.split, a.fold)?;
    let defaults = TrainConfig::default();
    let cfg = TrainConfig {
        epochs: a.epochs,
        iterations_per_epoch: a.iterations,
        batching: a.batching,
        block: a.block,
        depth: a.depth.unwrap_or(defaults.depth),
        loss: a.loss,
        extra: a.extra,
        metric: a.metric.unwrap_or(defaults.metric),
        lr: a.lr.unwrap_or(defaults.lr),
        seed: a.seed,
        ..defaults
    };
    let out = run_training(&ds, &fold, &cfg)?;

    ensure_parent(&a.out)?;
    let best = sibling(&a.out, "best.json");
    let metrics = sibling(&a.out, "metrics.csv");
    out.final_checkpoint.save(&a.out)?;
    out.best_checkpoint.save(&best)?;
    write_metrics_csv(&metrics, &out.metrics)?;
    let config = json!({
        "data": a.data,
        "split": a.split,
        "fold": a.fold,
        "train": cfg,
        "train_boards": out.train_boards,
        "validation_boards": out.validation_boards,
        "best_epoch": out.best_checkpoint.epoch,
    });
    write_manifest(
        &sibling(&a.out, "manifest.json"),
        argv,
        config,
        a.seed,
        &[a.out.clone(), best, metrics],
        start,
    )?;
    if let Some(last) = out.metrics.last() {
        println!(
            "epoch {}: loss {:.5}, validation top-1 {:.4}; best epoch {}",
            last.epoch, last.loss, last.eval_top1, out.best_checkpoint.epoch
        );
    }
    Ok(0)
}

fn eval(a: EvalArgs, argv: &[String], start: Instant) -> CliResult<i32> {
    require(&a.data)?;
    require(&a.split)?;
    require(&a.model)?;
    let ds = load_dataset(&a.data)?;
    let fold = fold_of(&a.split, a.fold)?;
    let ckpt = Checkpoint::load(&a.model)?;
    let test = ds.board_indices(&fold.test)?;
    let train = ds.board_indices(&fold.train)?;
    let plan = TemplatePlan {
        strategy: a.templates,
        training_boards: &train,
        seed: a.seed,
    };
    ensure_parent(&a.out)?;
    let mut artifacts = vec![a.out.clone()];
    let report = match a.mode {
        EvalMode::Classification => evaluate_classification(&ds, &test, &ckpt.model, &plan)?,
        EvalMode::Pipeline => {
            let r = run_pipeline_eval(&ds, &test, &ckpt.model, &plan, a.threshold)?;
            let csv = sibling(&a.out, "ap.csv");
            r.save_ap_csv(&csv)?;
            artifacts.push(csv);
            r
        }
    };
    report.save_json(&a.out)?;
    let config = json!({
        "data": a.data,
        "split": a.split,
        "fold": a.fold,
        "model": a.model,
        "mode": format!("{:?}", a.mode).to_lowercase(),
        "templates": a.templates.as_str(),
        "threshold": a.threshold,
    });
    write_manifest(
        &sibling(&a.out, "manifest.json"),
        argv,
        config,
        a.seed,
        &artifacts,
        start,
    )?;
    print_report_summary(&report);
    Ok(0)
}

fn print_report_summary(r: &crate::eval::EvalReport) {
    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
    println!(
        "top-1 {}  top-5 {}  mAP {}  ({} queries)",
        fmt(r.top1),
        fmt(r.top5),
        fmt(r.map),
        r.queries
    );
}

fn predict_cmd(a: PredictArgs, argv: &[String], start: Instant) -> CliResult<i32> {
    require(&a.board)?;
    require(&a.model)?;
    if a.templates != TemplateStrategy::RandomOnBoard {
        return Err(CliError::Usage(format!(
            "predict supports only --templates random; '{}' needs a training set",
            a.templates.as_str()
        )));
    }
    let board = load_board(&a.board)?;
    let ckpt = Checkpoint::load(&a.model)?;
    // the board must parse as a one-board dataset before predicting on it
    Dataset::new(vec![board.clone()])?;
    let detections = predict(&board, &ckpt.model, a.seed, a.threshold)?;
    ensure_parent(&a.out)?;
    let mut text = serde_json::to_string_pretty(&detections).map_err(Error::from)?;
    text.push('\n');
    write_atomic(&a.out, text.as_bytes())?;
    let config = json!({ "board": a.board, "model": a.model, "templates": a.templates.as_str(), "threshold": a.threshold });
    write_manifest(
        &sibling(&a.out, "manifest.json"),
        argv,
        config,
        a.seed,
        std::slice::from_ref(&a.out),
        start,
    )?;
    println!("{} detections on {}", detections.len(), board.board_id);
    Ok(0)
}

fn gradcheck_cmd(a: GradcheckArgs) -> CliResult<i32> {
    let r = gradcheck(a.block, a.loss, a.dim, a.nodes, a.seed, a.eps)?;
    let max = r.max_error();
    println!(
        "max relative error {max:.3e} (parameters {:.3e}, inputs {:.3e}; {} parameters)",
        r.params_error, r.input_error, r.num_params
    );
    Ok(if max < GRADCHECK_TOLERANCE { 0 } else { 1 })
}
