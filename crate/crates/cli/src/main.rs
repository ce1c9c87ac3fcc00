//! `capsroute` command line: train, evaluate, analyse and gradient-check
//! capsule networks.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::Entries;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Env(String),
    /// A check ran and did not pass.
    #[error("{0}")]
    Check(String),
    #[error(transparent)]
    Core(#[from] capsroute::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Check(_) | CliError::Core(capsroute::Error::Numeric(_)) => 1,
            _ => 2,
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "capsroute", version, about = "Capsule networks with self-attention routing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write its log, checkpoints and resolved config.
    Train(TrainArgs),
    /// Test error of a checkpoint or of a thresholded ensemble.
    Eval(EvalArgs),
    /// Operation census, perturbations, PCA equivariance, error listings.
    Analyze(AnalyzeArgs),
    /// Finite-difference check of every differentiable op at f64.
    Gradcheck(GradcheckArgs),
}

/// Options shared by every command that reads a run configuration.
#[derive(Args, Debug, Default)]
struct Common {
    /// Flat key = value configuration file.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Model and training preset (mnist, multimnist).
    #[arg(long)]
    preset: Option<String>,
    /// Directory with the IDX files; falls back to CAPSROUTE_DATA_DIR.
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
    /// Parent directory of the run directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Single-threaded, bit-reproducible numerics.
    #[arg(long)]
    strict: bool,
}

impl Common {
    fn entries(&self) -> Entries {
        let mut e = Entries::new();
        put(&mut e, "preset", self.preset.as_ref());
        put(&mut e, "data_dir", self.data.as_ref().map(|p| p.display()));
        put(&mut e, "out", self.out.as_ref().map(|p| p.display()));
        put(&mut e, "seed", self.seed);
        if self.strict {
            e.insert("strict".into(), "true".into());
        }
        e
    }
}

fn put(e: &mut Entries, key: &str, value: Option<impl ToString>) {
    if let Some(v) = value {
        e.insert(key.to_string(), v.to_string());
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    epochs: Option<usize>,
    /// Train on the first N digits only.
    #[arg(long, value_name = "N")]
    limit: Option<usize>,
    /// Evaluate on the first N test digits only.
    #[arg(long, value_name = "N")]
    test_limit: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Initial learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// No per-epoch progress lines.
    #[arg(long)]
    quiet: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_name = "FILE", conflicts_with = "ensemble")]
    checkpoint: Option<PathBuf>,
    /// Comma-separated checkpoints scored as one ensemble.
    #[arg(long, value_name = "FILES", value_delimiter = ',')]
    ensemble: Option<Vec<PathBuf>>,
    /// Minimum accuracy for a member to join the ensemble.
    #[arg(long)]
    threshold: Option<f64>,
    /// Top-k scoring (2 for MultiMNIST).
    #[arg(long)]
    k: Option<usize>,
    /// Evaluate on the first N test digits only.
    #[arg(long, value_name = "N")]
    limit: Option<usize>,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    #[command(subcommand)]
    action: Analysis,
}

#[derive(Args, Debug)]
struct ModelArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_name = "FILE")]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Analysis {
    /// Parameter and operation counts per layer.
    Ops {
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Decode the longest capsule with one coordinate nudged.
    Perturb {
        #[command(flatten)]
        model: ModelArgs,
        /// Capsule coordinate to perturb; all coordinates when omitted.
        #[arg(long)]
        dim: Option<usize>,
        /// Test sample to use.
        #[arg(long)]
        index: Option<usize>,
    },
    /// Principal-component spread of output capsules under a transform sweep.
    Pca {
        #[command(flatten)]
        model: ModelArgs,
        /// translate_x, translate_y, rotate or random.
        #[arg(long)]
        family: String,
        /// correct_class or concatenated.
        #[arg(long)]
        view: Option<String>,
        /// Number of test images.
        #[arg(long, value_name = "N")]
        images: Option<usize>,
        /// Repetitions of the random baseline.
        #[arg(long)]
        repetitions: Option<usize>,
    },
    /// Misclassified test samples, least confident first.
    Errors {
        #[command(flatten)]
        model: ModelArgs,
        /// Number of images in the error grid.
        #[arg(long)]
        count: Option<usize>,
        /// Evaluate on the first N test digits only.
        #[arg(long, value_name = "N")]
        limit: Option<usize>,
    },
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Scale the named op's first gradient, to exercise failure reporting.
    #[arg(long, hide = true, value_name = "OP")]
    inject_fault: Option<String>,
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(a) => {
            let mut flags = a.common.entries();
            put(&mut flags, "epochs", a.epochs);
            put(&mut flags, "train_limit", a.limit);
            put(&mut flags, "test_limit", a.test_limit);
            put(&mut flags, "batch_size", a.batch_size);
            put(&mut flags, "lr0", a.lr);
            flags.insert("progress".into(), (!a.quiet).to_string());
            commands::train(a.common.config.as_deref(), flags)
        }
        Command::Eval(a) => {
            let mut flags = a.common.entries();
            put(&mut flags, "checkpoint", a.checkpoint.as_ref().map(|p| p.display()));
            if let Some(list) = &a.ensemble {
                let joined: Vec<String> = list.iter().map(|p| p.display().to_string()).collect();
                flags.insert("ensemble".into(), joined.join(","));
            }
            put(&mut flags, "threshold", a.threshold);
            put(&mut flags, "k", a.k);
            put(&mut flags, "test_limit", a.limit);
            commands::eval(a.common.config.as_deref(), flags)
        }
        Command::Analyze(a) => {
            let (name, model, mut flags) = match a.action {
                Analysis::Ops { model } => ("ops", model, Entries::new()),
                Analysis::Perturb { model, dim, index } => {
                    let mut e = Entries::new();
                    put(&mut e, "dim", dim);
                    put(&mut e, "index", index);
                    ("perturb", model, e)
                }
                Analysis::Pca {
                    model,
                    family,
                    view,
                    images,
                    repetitions,
                } => {
                    let mut e = Entries::new();
                    e.insert("family".into(), family);
                    put(&mut e, "view", view);
                    put(&mut e, "images", images);
                    put(&mut e, "repetitions", repetitions);
                    ("pca", model, e)
                }
                Analysis::Errors { model, count, limit } => {
                    let mut e = Entries::new();
                    put(&mut e, "count", count);
                    put(&mut e, "test_limit", limit);
                    ("errors", model, e)
                }
            };
            flags.extend(model.common.entries());
            put(&mut flags, "checkpoint", model.checkpoint.as_ref().map(|p| p.display()));
            commands::analyze(name, model.common.config.as_deref(), flags)
        }
        Command::Gradcheck(a) => commands::gradcheck(a.seed, a.inject_fault.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
