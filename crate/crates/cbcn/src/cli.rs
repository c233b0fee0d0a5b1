//! The `cbcn` command line.
//!
//! Exit codes: 0 success, 1 runtime failure (including divergence and
//! failed checks), 2 configuration or usage error.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use cbcn_core::data::LabeledImageSet;
use cbcn_core::gradcheck::{run_suite, SuiteSize};
use cbcn_core::inference::PackedModel;
use cbcn_core::tensor::Tensor4;
use cbcn_core::train::{evaluate, EpochMetrics, Evaluation, Split, Trainer};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::checkpoint::{self, KIND_CHECKPOINT};
use crate::dataset::Mnist;
use crate::manifest::{self, RunManifest, RunSummary};
use crate::metrics::MetricsWriter;
use crate::{bench, config, Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.cbcn";
pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Debug, Parser)]
#[command(name = "cbcn", version, about = "Circulant binary convolutional networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write metrics, a checkpoint and a manifest.
    Train(TrainArgs),
    /// Report test accuracy of a checkpoint or an exported model.
    Eval(EvalArgs),
    /// Finite-difference and adjointness gradient checks.
    Gradcheck(GradcheckArgs),
    /// Time popcount against float convolution.
    BenchConv(BenchArgs),
    /// Write the packed 1-bit inference model.
    Export(ExportArgs),
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Directory with the four MNIST IDX files.
    #[arg(long)]
    pub data: PathBuf,
    /// Use the first N samples of each split.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Use MNIST-rot (every sample rotated once in [-45, 45] degrees).
    #[arg(long)]
    pub rot: bool,
    /// Seed of the MNIST-rot rotations.
    #[arg(long, default_value_t = 0)]
    pub rot_seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides `epochs` from the config.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Continue from the checkpoint in `--out`.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// A training checkpoint or an exported model.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Layers {
    Small,
    Full,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, value_enum, default_value_t = Layers::Small)]
    pub layers: Layers,
    /// Corrupts the fold permutation; every network check should fail.
    #[arg(long, hide = true)]
    pub corrupt_fold: bool,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// `preset` or `quick`.
    #[arg(long, default_value = "preset")]
    pub shapes: String,
    /// Minimum timing budget per path and shape.
    #[arg(long, default_value_t = 300)]
    pub budget_ms: u64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `std::env::args`, runs the command and returns the exit code.
pub fn main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let stdout = std::io::stdout();
    match run(cli, &mut stdout.lock()) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli, out: &mut impl Write) -> Result<()> {
    match cli.command {
        Command::Train(a) => train(&a, out),
        Command::Eval(a) => eval(&a, out),
        Command::Gradcheck(a) => gradcheck(&a, out),
        Command::BenchConv(a) => bench_conv(&a, out),
        Command::Export(a) => export(&a, out),
    }
}

fn stdout_error(e: std::io::Error) -> Error {
    Error::io("<stdout>", e)
}

fn load_data(args: &DataArgs) -> Result<Mnist> {
    let mut data = Mnist::load(&args.data)?;
    if let Some(n) = args.limit {
        data = data.truncated(n)?;
    }
    if args.rot {
        data = data.rotated(args.rot_seed)?;
    }
    Ok(data)
}

fn resize(set: &LabeledImageSet, side: usize) -> Result<LabeledImageSet> {
    if set.side() == side {
        Ok(set.clone())
    } else {
        Ok(set.padded(side)?)
    }
}

fn train(args: &TrainArgs, out: &mut impl Write) -> Result<()> {
    let mut cfg = config::load(&args.config)?;
    if let Some(e) = args.epochs {
        cfg.epochs = e;
        cfg.validate().map_err(|e| Error::Config(e.to_string()))?;
    }
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let manifest_path = args.out.join(MANIFEST_FILE);
    let metrics_path = args.out.join(METRICS_FILE);
    let checkpoint_path = args.out.join(CHECKPOINT_FILE);
    let summary_path = args.out.join(SUMMARY_FILE);

    let data = load_data(&args.data)?;
    let mut trainer = if args.resume {
        let saved = checkpoint::load_checkpoint(&checkpoint_path)?;
        let mut expected = saved.config().clone();
        expected.epochs = cfg.epochs;
        expected.center_epochs = cfg.center_epochs;
        if expected != cfg {
            return Err(Error::Config(format!(
                "{} was trained with a different configuration",
                checkpoint_path.display()
            )));
        }
        Trainer::from_state(cfg.clone(), saved.state)?
    } else {
        Trainer::new(cfg.clone(), &data.train)?
    };
    let train_set = cfg.prepare_set(&data.train)?;
    let test_set = cfg.prepare_set(&data.test)?;

    if !(args.resume && manifest_path.exists()) {
        let manifest = RunManifest::new(
            &cfg,
            &args.data.data,
            args.data.rot.then_some(args.data.rot_seed),
            args.data.limit,
            &[
                ("metrics", &metrics_path),
                ("checkpoint", &checkpoint_path),
                ("summary", &summary_path),
            ],
        )?;
        manifest::write_json(&manifest_path, &manifest)?;
    }
    if !args.resume && metrics_path.exists() {
        std::fs::remove_file(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    }
    let mut metrics = MetricsWriter::open(&metrics_path)?;

    let start = Instant::now();
    let total = cfg.total_epochs();
    let mut last_test = None;
    while !trainer.is_finished() {
        let train_m = trainer.run_epoch(&train_set)?;
        let e = trainer.evaluate(&test_set)?;
        let test_m = EpochMetrics {
            split: Split::Test,
            loss: e.loss,
            accuracy: e.accuracy(),
            ..train_m
        };
        let seconds = start.elapsed().as_secs_f64();
        metrics.append(&train_m, seconds)?;
        metrics.append(&test_m, seconds)?;
        checkpoint::save_checkpoint(&checkpoint_path, &trainer)?;
        last_test = Some(e);
        writeln!(
            out,
            "epoch {}/{total} lr={} train_loss={:.4} train_acc={:.2}% test_loss={:.4} test_error={:.2}% ({seconds:.1}s)",
            train_m.epoch + 1,
            train_m.lr,
            train_m.loss,
            100.0 * train_m.accuracy,
            test_m.loss,
            100.0 * (1.0 - test_m.accuracy),
        )
        .map_err(stdout_error)?;
    }

    let summary = RunSummary {
        finished_unix: manifest::unix_now(),
        epochs_completed: trainer.state.epoch,
        final_test_accuracy: last_test.as_ref().map(Evaluation::accuracy),
        final_test_error_rate: last_test.as_ref().map(Evaluation::error_rate),
    };
    manifest::write_json(&summary_path, &summary)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub split: String,
    pub correct: usize,
    pub total: usize,
    /// Percent.
    pub accuracy: f64,
    /// Percent.
    pub error_rate: f64,
}

impl EvalReport {
    fn new(split: &str, correct: usize, total: usize) -> Self {
        let accuracy = 100.0 * correct as f64 / total.max(1) as f64;
        Self {
            split: split.to_string(),
            correct,
            total,
            accuracy,
            error_rate: 100.0 - accuracy,
        }
    }
}

enum Model {
    Float(Trainer),
    Packed(PackedModel),
}

impl Model {
    fn load(path: &Path) -> Result<Self> {
        if checkpoint::peek_kind(path)? == KIND_CHECKPOINT {
            Ok(Model::Float(checkpoint::load_checkpoint(path)?))
        } else {
            Ok(Model::Packed(checkpoint::load_export(path)?))
        }
    }

    fn correct(&mut self, set: &LabeledImageSet) -> Result<usize> {
        match self {
            Model::Float(t) => {
                let set = resize(set, t.network().topology().input_side)?;
                let e = evaluate(t.network_mut(), &set, 256)?;
                Ok(e.correct)
            }
            Model::Packed(m) => {
                let set = resize(set, m.topology().input_side)?;
                let mut correct = 0;
                let idx: Vec<usize> = (0..set.len()).collect();
                for chunk in idx.chunks(256) {
                    let (images, labels): (Tensor4, Vec<usize>) = set.batch(chunk)?;
                    correct += m.predict(&images)?.iter().zip(&labels).filter(|(p, y)| p == y).count();
                }
                Ok(correct)
            }
        }
    }
}

/// Accuracy on the plain test set and, with `--rot`, on MNIST-rot.
pub fn eval_reports(args: &EvalArgs) -> Result<Vec<EvalReport>> {
    let mut model = Model::load(&args.checkpoint)?;
    let mut plain = Mnist::load(&args.data.data)?;
    if let Some(n) = args.data.limit {
        plain = plain.truncated(n)?;
    }
    let mut reports = vec![EvalReport::new("test", model.correct(&plain.test)?, plain.test.len())];
    if args.data.rot {
        let rot = plain.rotated(args.data.rot_seed)?;
        reports.push(EvalReport::new("test-rot", model.correct(&rot.test)?, rot.test.len()));
    }
    Ok(reports)
}

fn eval(args: &EvalArgs, out: &mut impl Write) -> Result<()> {
    let reports = eval_reports(args)?;
    if args.json {
        writeln!(out, "{}", serde_json::to_string_pretty(&reports)?).map_err(stdout_error)?;
    } else {
        for r in &reports {
            writeln!(
                out,
                "split={} correct={}/{} accuracy={:.2}% error_rate={:.2}%",
                r.split, r.correct, r.total, r.accuracy, r.error_rate
            )
            .map_err(stdout_error)?;
        }
    }
    Ok(())
}

fn gradcheck(args: &GradcheckArgs, out: &mut impl Write) -> Result<()> {
    let size = match args.layers {
        Layers::Small => SuiteSize::Small,
        Layers::Full => SuiteSize::Full,
    };
    let report = run_suite(size, args.corrupt_fold)?;
    for c in &report.checks {
        writeln!(
            out,
            "{} {} checked={} max_rel_error={:.3e} tolerance={:.0e}",
            if c.passed() { "PASS" } else { "FAIL" },
            c.name,
            c.checked,
            c.max_rel_error,
            c.tolerance
        )
        .map_err(stdout_error)?;
    }
    if report.passed() {
        Ok(())
    } else {
        let failed = report.checks.iter().filter(|c| !c.passed()).count();
        Err(Error::Check(format!("{failed} of {} gradient checks failed", report.checks.len())))
    }
}

fn bench_conv(args: &BenchArgs, out: &mut impl Write) -> Result<()> {
    let shapes = bench::shapes(&args.shapes)?;
    writeln!(out, "{}", bench::HEADER).map_err(stdout_error)?;
    let mut rows = Vec::new();
    for s in shapes {
        let r = bench::bench_shape(s, args.seed, Duration::from_millis(args.budget_ms))?;
        for row in &r {
            writeln!(out, "{}", bench::format_row(row)).map_err(stdout_error)?;
        }
        rows.extend(r);
    }
    for (shape, speedup) in bench::speedups(&rows) {
        eprintln!("{shape}: popcount {speedup:.1}x faster than the best float path");
    }
    Ok(())
}

fn export(args: &ExportArgs, out: &mut impl Write) -> Result<()> {
    let trainer = checkpoint::load_checkpoint(&args.checkpoint)?;
    let model = PackedModel::from_network(trainer.network())?;
    checkpoint::save_export(&args.out, &model)?;
    writeln!(
        out,
        "conv_weights={} payload_bytes={} float32_bytes={} compression={:.2}x",
        model.conv_weight_count(),
        model.conv_payload_bytes(),
        4 * model.conv_weight_count(),
        model.compression_ratio()
    )
    .map_err(stdout_error)
}
