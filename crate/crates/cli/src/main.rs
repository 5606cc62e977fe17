//! `ace`: train the desk-scale assets, explain instances, score batches of
//! explanations and run the workbench service.

mod commands;
mod failure;

use std::net::SocketAddr;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "ace", version, about = "Adversarial counterfactual explanations for image classifiers")]
pub struct Cli {
    #[command(flatten)]
    pub settings: SettingsArgs,

    /// Log verbosity (repeat for more detail). `RUST_LOG` takes precedence.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

/// Configuration layers, lowest precedence first: built-in defaults,
/// `--preset`, `--config`, then each `--set` in order.
#[derive(Debug, Clone, Default, Args)]
pub struct SettingsArgs {
    /// Named hyper-parameter preset (celeba-like, bdd-like, desk).
    #[arg(long, global = true, value_name = "NAME")]
    pub preset: Option<String>,

    /// TOML file with settings; overrides the preset.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Single setting, e.g. `explain.attack.tau=5`. Repeatable; overrides the
    /// config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the noise-prediction model of the diffusion filter.
    TrainDdpm(TrainDdpmArgs),
    /// Train a classifier to explain, or an encoder used by the metrics.
    TrainClassifier(TrainClassifierArgs),
    /// Explain one instance and write a run directory.
    Explain(ExplainArgs),
    /// Explain one instance several times with different seeds.
    Diversity(DiversityArgs),
    /// Score a directory of run directories.
    Evaluate(EvaluateArgs),
    /// Run the HTTP workbench service.
    Serve(ServeArgs),
    /// Turn a directory of PNG files and a label manifest into a dataset.
    Ingest(IngestArgs),
    /// Print the effective settings as TOML.
    Config,
}

#[derive(Debug, Args)]
pub struct TrainDdpmArgs {
    /// `synthetic`, a `.dataset` file, or a directory to ingest.
    #[arg(long, default_value = "synthetic")]
    pub dataset: String,
    /// Training seed; overrides `denoiser.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Checkpoint to write.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Role {
    /// The classifier under explanation.
    Target,
    /// An independently trained classifier used as FID/sFID encoder.
    Fid,
    /// A self-supervised contrastive encoder for the S3 metric.
    S3,
}

#[derive(Debug, Args)]
pub struct TrainClassifierArgs {
    #[arg(long, value_enum, default_value_t = Role::Target)]
    pub role: Role,
    /// `synthetic`, a `.dataset` file, or a directory to ingest.
    #[arg(long, default_value = "synthetic")]
    pub dataset: String,
    /// Training seed; overrides `classifier.seed` or `encoder.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Checkpoint to write.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct InstanceArgs {
    /// Classifier checkpoint.
    #[arg(long, value_name = "FILE")]
    pub classifier: PathBuf,
    /// Denoiser checkpoint.
    #[arg(long, value_name = "FILE")]
    pub denoiser: PathBuf,
    /// PNG image to explain.
    #[arg(long, value_name = "FILE", conflicts_with = "dataset")]
    pub image: Option<PathBuf>,
    /// Dataset holding the instance: `synthetic`, a `.dataset` file, or a
    /// directory to ingest.
    #[arg(long, requires = "index")]
    pub dataset: Option<String>,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Position of the instance within the split.
    #[arg(long)]
    pub index: Option<usize>,
    /// Label to reach. May be omitted for two-class models, where the
    /// other class is used.
    #[arg(long)]
    pub target: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    #[command(flatten)]
    pub instance: InstanceArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Run directory to write.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Omit wall-clock fields from the manifest so that equal invocations
    /// produce byte-identical files.
    #[arg(long)]
    pub canonical: bool,
}

#[derive(Debug, Args)]
pub struct DiversityArgs {
    #[command(flatten)]
    pub instance: InstanceArgs,
    /// One explanation per seed, comma separated.
    #[arg(long, value_delimiter = ',', num_args = 1.., default_value = "0,1,2,3")]
    pub seeds: Vec<u64>,
    /// Directory receiving one run directory per seed and `diversity.json`.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Omit wall-clock fields from the manifests.
    #[arg(long)]
    pub canonical: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// A run directory, or a directory whose sub-directories are runs.
    #[arg(long, value_name = "DIR")]
    pub runs: PathBuf,
    /// Comma-separated metrics (flip-rate, fid, sfid, fs, s3, cout,
    /// diversity) or `all`.
    #[arg(long, default_value = "all")]
    pub metrics: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Classifier the runs explain; needed by cout and as the default
    /// encoder for fid, sfid, fs and diversity.
    #[arg(long, value_name = "FILE")]
    pub classifier: Option<PathBuf>,
    /// Checkpoint encoding images for fid and sfid.
    #[arg(long, value_name = "FILE")]
    pub fid_encoder: Option<PathBuf>,
    /// Checkpoint encoding images for fs.
    #[arg(long, value_name = "FILE")]
    pub fs_encoder: Option<PathBuf>,
    /// Self-supervised encoder checkpoint for s3.
    #[arg(long, value_name = "FILE")]
    pub s3_encoder: Option<PathBuf>,
    /// Report file; printed to stdout when absent.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, env = "ACE_LISTEN", default_value = "127.0.0.1:8080")]
    pub listen: SocketAddr,
    /// Registry, run and batch storage.
    #[arg(long, env = "ACE_DATA_ROOT", default_value = "ace-data", value_name = "DIR")]
    pub data_root: PathBuf,
    /// Explanations run concurrently.
    #[arg(long, env = "ACE_SLOTS", default_value_t = 1)]
    pub slots: usize,
    /// Runs that may wait before submissions are refused.
    #[arg(long, env = "ACE_QUEUE_CAPACITY", default_value_t = 64)]
    pub queue_capacity: usize,
    /// Refuse dataset directories with any unreadable or unlabelled file.
    #[arg(long, env = "ACE_STRICT_INGEST")]
    pub strict_ingest: bool,
    /// Static front-end bundle served next to the API.
    #[arg(long, env = "ACE_UI_DIR", value_name = "DIR")]
    pub ui_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Directory of PNG files.
    #[arg(long, value_name = "DIR")]
    pub dir: PathBuf,
    /// Label manifest; defaults to `labels.csv` inside the directory.
    #[arg(long, value_name = "FILE")]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub name: Option<String>,
    /// Fraction of each class held out as the `test` split.
    #[arg(long, default_value_t = 0.1)]
    pub test_fraction: f64,
    /// Seed of the train/test partition.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Skip problem files instead of failing.
    #[arg(long)]
    pub lenient: bool,
    /// Dataset archive to write.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

fn init_logging(verbose: u8) {
    let default = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let filter = tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| default.into());
    let _ = tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr).try_init();
}

fn main() {
    let cli = Cli::parse();
    init_logging(cli.verbose);
    if let Err(failure) = commands::run(cli) {
        eprintln!("{}", failure.summary());
        std::process::exit(failure.exit_code());
    }
}
