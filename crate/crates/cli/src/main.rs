//! `langneck`: data generation, warm-up, training, evaluation, sampling and
//! gradient checks for the word-bottleneck classifier.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use langneck_core::Error;

use config::RunConfig;

#[derive(Parser)]
#[command(name = "langneck", version, about = "Image classification through a bottleneck of words")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the training and validation sets and the vocabulary.
    GenData(GenDataArgs),
    /// Captioning warm-up of the backbone; writes a frozen checkpoint.
    Warmup(WarmupArgs),
    /// Train soft prompt and head for one variant.
    Train(TrainArgs),
    /// Evaluate a checkpoint on clean and corrupted validation data.
    Eval(EvalArgs),
    /// Print the word descriptions of validation images.
    Sample(SampleArgs),
    /// Finite-difference check of the full pipeline at tiny dimensions.
    GradCheck(GradCheckArgs),
}

#[derive(Args)]
struct Common {
    /// `key = value` configuration file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    common: Common,
    /// Number of training images.
    #[arg(long)]
    train: Option<usize>,
    /// Number of validation images.
    #[arg(long)]
    val: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct WarmupArgs {
    #[command(flatten)]
    common: Common,
    /// Directory written by `gen-data`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint file to write.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    warmup_epochs: Option<usize>,
    #[arg(long)]
    warmup_lr: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Warmed-up checkpoint; the warm-up runs first when absent.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Output directory for checkpoints and the report.
    #[arg(long)]
    out: PathBuf,
    /// plain, token_sim, llm_loss, no_rep_eval or caption_baseline.
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    lambda_sim: Option<f64>,
    #[arg(long)]
    lambda_llm: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr_prompt: Option<f64>,
    #[arg(long)]
    lr_head: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// sgd, sgd_momentum_0.9 or adam.
    #[arg(long)]
    optimizer: Option<String>,
    #[arg(long)]
    warmup_epochs: Option<usize>,
    /// Also evaluate every corruption kind and severity.
    #[arg(long)]
    corruption_sweep: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    checkpoint: PathBuf,
    /// soft, hard, no_rep or caption.
    #[arg(long)]
    path: Option<String>,
    /// Report prefix; `.csv` and `.json` are appended.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SampleArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    checkpoint: PathBuf,
    /// hard, no_rep, soft or caption.
    #[arg(long)]
    path: Option<String>,
    /// Number of validation images to describe.
    #[arg(long)]
    count: Option<usize>,
}

#[derive(Args)]
struct GradCheckArgs {
    #[command(flatten)]
    common: Common,
    /// Finite-difference step.
    #[arg(long)]
    h: Option<f64>,
    /// Corrupt one backward rule; the check must then fail.
    #[arg(long)]
    sabotage: bool,
}

fn resolve(common: &Common, flags: &[(&str, Option<String>)]) -> Result<RunConfig, Error> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &common.config {
        cfg.apply_file(path)?;
    }
    for s in &common.sets {
        let (k, v) = s.split_once('=').ok_or_else(|| Error::Argument(format!("--set expects KEY=VALUE, got {s:?}")))?;
        cfg.set(k, v)?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    for (k, v) in flags {
        if let Some(v) = v {
            cfg.set(k, v)?;
        }
    }
    Ok(cfg)
}

fn s<T: ToString>(v: &Option<T>) -> Option<String> {
    v.as_ref().map(ToString::to_string)
}

fn p(v: &Option<PathBuf>) -> Option<String> {
    v.as_ref().map(|p| p.display().to_string())
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::GenData(a) => {
            let cfg = resolve(&a.common, &[("train", s(&a.train)), ("val", s(&a.val))])?;
            commands::gen_data(&cfg, &a.out)
        }
        Command::Warmup(a) => {
            let cfg = resolve(
                &a.common,
                &[("data", p(&a.data)), ("warmup_epochs", s(&a.warmup_epochs)), ("warmup_lr", s(&a.warmup_lr))],
            )?;
            commands::warmup(&cfg, &a.out)
        }
        Command::Train(a) => {
            let cfg = resolve(
                &a.common,
                &[
                    ("data", p(&a.data)),
                    ("variant", a.variant.clone()),
                    ("lambda_sim", s(&a.lambda_sim)),
                    ("lambda_llm", s(&a.lambda_llm)),
                    ("epochs", s(&a.epochs)),
                    ("lr_prompt", s(&a.lr_prompt)),
                    ("lr_head", s(&a.lr_head)),
                    ("batch_size", s(&a.batch_size)),
                    ("optimizer", a.optimizer.clone()),
                    ("warmup_epochs", s(&a.warmup_epochs)),
                ],
            )?;
            commands::train(&cfg, a.init.as_deref(), &a.out, a.corruption_sweep)
        }
        Command::Eval(a) => {
            let cfg = resolve(&a.common, &[("data", p(&a.data)), ("path", a.path.clone())])?;
            commands::eval(&cfg, &a.checkpoint, &a.out)
        }
        Command::Sample(a) => {
            let cfg = resolve(&a.common, &[("data", p(&a.data)), ("path", a.path.clone()), ("count", s(&a.count))])?;
            commands::sample(&cfg, &a.checkpoint)
        }
        Command::GradCheck(a) => {
            let cfg = resolve(&a.common, &[("h", s(&a.h))])?;
            commands::grad_check(&cfg, a.sabotage)
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Argument(_) | Error::Io { .. } => 2,
        Error::Mismatch(_) | Error::Format { .. } => 3,
        Error::Numerical(_) | Error::Tensor(_) => 4,
    }
}

fn init_threads() -> Result<(), Error> {
    let Ok(v) = std::env::var("LANGNECK_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Argument(format!("LANGNECK_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Argument(format!("thread pool: {e}")))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match init_threads().and_then(|()| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
