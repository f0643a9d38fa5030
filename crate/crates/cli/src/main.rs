//! `squq`: batch driver for clustering, semantic entropy, conformal
//! calibration/prediction, evaluation and simulation.

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

pub use output::CliError;

#[derive(Debug, Parser)]
#[command(name = "squq", version, about = "Semantic uncertainty and conformal prediction sets for sampled LLM responses")]
pub struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Seed for every random choice the command makes.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct ClusterOpts {
    /// Entailment-to-new-cluster concentration.
    #[arg(long, default_value_t = squq_core::clustering::DEFAULT_ALPHA)]
    pub alpha: f64,
}

#[derive(Debug, Args, Clone)]
pub struct ScoreOpts {
    #[command(flatten)]
    pub cluster: ClusterOpts,
    /// `unnormalized` (sequence log-prob) or `length_normalized`.
    #[arg(long, default_value = "unnormalized")]
    pub variant: String,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Cluster each record's responses; writes {query_id, assignments}.
    Cluster {
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        opts: ClusterOpts,
        #[arg(long)]
        output: PathBuf,
    },
    /// Semantic entropy per record; writes {query_id, semantic_entropy, n_clusters}.
    Uq {
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        opts: ScoreOpts,
        #[arg(long)]
        output: PathBuf,
    },
    /// Fit the conformal threshold on a labelled calibration corpus.
    Calibrate {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        epsilon: f64,
        #[command(flatten)]
        opts: ScoreOpts,
        #[arg(long)]
        model_out: PathBuf,
    },
    /// Prediction sets for a corpus under a calibration model.
    Predict {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Metric report (JSON) and coverage/set-size sweep (CSV).
    Eval(EvalArgs),
    /// Monte-Carlo check of the coverage guarantee.
    Simulate {
        #[arg(long, default_value_t = 99)]
        n_cal: usize,
        #[arg(long, default_value_t = 100)]
        n_test: usize,
        #[arg(long, default_value_t = 2000)]
        trials: usize,
        #[arg(long, default_value_t = 0.2)]
        epsilon: f64,
        /// `uniform`, `exponential` or `lognormal`.
        #[arg(long, default_value = "uniform")]
        dist: String,
        /// Also write the full report as JSON.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Sample responses and build records from a questions file.
    Generate(GenerateArgs),
    /// Write a synthetic corpus with planted semantic groups.
    Synth {
        #[arg(long, default_value_t = 100)]
        n_queries: usize,
        #[arg(long, default_value_t = 20)]
        n_responses: usize,
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
        #[arg(long)]
        output: PathBuf,
    },
    /// Deterministic calibration/test split of a corpus.
    Split {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        calibration_fraction: f64,
        /// `by_query_hash` or `by_order`.
        #[arg(long, default_value = "by_query_hash")]
        strategy: String,
        #[arg(long)]
        cal_out: PathBuf,
        #[arg(long)]
        test_out: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Labelled corpus the predictions / scores refer to.
    #[arg(long)]
    pub labels: PathBuf,
    /// UQ scores from `squq uq`; computed from the corpus when omitted.
    #[arg(long)]
    pub uq: Option<PathBuf>,
    /// Prediction sets from `squq predict`, scored for coverage.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    /// Calibration model; enables the epsilon sweep CSV.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Comma-separated subset of auroc,auarc,aurac,point_accuracy.
    #[arg(long, value_delimiter = ',', default_value = "auroc,auarc,aurac,point_accuracy")]
    pub metrics: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.2,0.3,0.4,0.5")]
    pub epsilons: Vec<f64>,
    /// Also write accuracy-rejection curves as CSV.
    #[arg(long)]
    pub curves: bool,
    #[command(flatten)]
    pub opts: ScoreOpts,
    /// Output prefix: writes `<report>.json` and `<report>.csv`.
    #[arg(long)]
    pub report: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// JSONL of {query_id, question, context?, references?}.
    #[arg(long)]
    pub questions: PathBuf,
    #[arg(long, default_value = "http://127.0.0.1:8000")]
    pub endpoint: String,
    #[arg(long, default_value = "http://127.0.0.1:8100")]
    pub sidecar: String,
    /// Samples per question.
    #[arg(long, default_value_t = squq_core::clients::DEFAULT_N_SAMPLES)]
    pub n: usize,
    #[arg(long, default_value = "default")]
    pub model_name: String,
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    #[arg(long, default_value_t = 64)]
    pub max_tokens: usize,
    /// Environment variable holding the API key.
    #[arg(long, default_value = squq_core::clients::DEFAULT_API_KEY_ENV)]
    pub api_key_env: String,
    #[arg(long, default_value_t = 4)]
    pub max_in_flight: usize,
    #[arg(long, default_value_t = 4)]
    pub max_retries: u32,
    #[arg(long, default_value_t = 500)]
    pub retry_base_ms: u64,
    #[arg(long, default_value_t = 60)]
    pub timeout_secs: u64,
    /// Ask for all samples in one request via `n`.
    #[arg(long)]
    pub batch_with_n: bool,
    /// Read records from recorded fixtures instead of the network.
    #[arg(long)]
    pub fixtures: Option<PathBuf>,
    /// Record every live record as a fixture in this directory.
    #[arg(long, conflicts_with = "fixtures")]
    pub save_fixtures: Option<PathBuf>,
    #[arg(long)]
    pub output: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help and version go to stdout with status 0, usage errors exit 2
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e.source);
            ExitCode::from(e.code)
        }
    }
}
