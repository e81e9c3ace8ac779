//! Command-line front end for the PLDA back-ends: synthetic data generation,
//! preprocessing, training, scoring and evaluation, with reproducible seeds
//! and a manifest written next to every output.

mod commands;
mod manifest;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use plda_core::Error;

#[derive(Parser)]
#[command(name = "plda", version, about = "PLDA verification back-ends")]
struct Cli {
    /// Worker threads for scoring (results are independent of the count)
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a ground-truth model, train/test datasets and a trial list
    Synth(SynthArgs),
    /// Fit or apply the LDA + center + length-normalization pipeline
    Preprocess(PreprocessArgs),
    /// Train a model on a labeled dataset
    Train(TrainArgs),
    /// Score a trial list against a trained model
    Score(ScoreArgs),
    /// Compute EER, Cllr and a DET curve from scores and trial keys
    Eval(EvalArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Scenario config JSON (see README for the schema)
    #[arg(long, conflicts_with = "preset")]
    config: Option<std::path::PathBuf>,
    /// Built-in scenario: `full` (some bilingual speakers) or `single-lan`
    #[arg(long, value_parser = ["full", "single-lan"])]
    preset: Option<String>,
    #[arg(long)]
    out_dir: std::path::PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Held-out speakers for the test split
    #[arg(long, default_value_t = 100)]
    test_speakers: usize,
    #[arg(long, default_value_t = 500)]
    trials_per_cell: usize,
}

#[derive(Args)]
struct PreprocessArgs {
    /// Input dataset TSV
    #[arg(long)]
    data: std::path::PathBuf,
    /// Transformed dataset TSV
    #[arg(long)]
    out: std::path::PathBuf,
    /// Apply an existing pipeline JSON
    #[arg(long, conflicts_with_all = ["fit_dim", "save_pipeline"])]
    pipeline: Option<std::path::PathBuf>,
    /// Output dimension when fitting; defaults to the input dimension
    /// (no reduction, but the data is still rotated and normalized)
    #[arg(long, requires = "save_pipeline")]
    fit_dim: Option<usize>,
    /// Fit a pipeline on --data and store it here
    #[arg(long)]
    save_pipeline: Option<std::path::PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_parser = ["splda", "fplda", "tplda", "jplda"])]
    model: String,
    #[arg(long)]
    data: std::path::PathBuf,
    #[arg(long)]
    out: std::path::PathBuf,
    /// Speaker rank
    #[arg(long, default_value_t = 200)]
    ry: usize,
    /// Channel/condition rank (ignored for splda and tplda)
    #[arg(long)]
    rx: Option<usize>,
    /// EM iterations; defaults depend on the model and initialization
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long, value_parser = ["random", "smart"])]
    init: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Constrain the noise precision to be diagonal
    #[arg(long)]
    d_diagonal: bool,
    /// Condition-to-component map for tplda, e.g. `eng=0,spa=1,rus=1`
    #[arg(long)]
    component_map: Option<String>,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    model_file: std::path::PathBuf,
    #[arg(long)]
    enroll: std::path::PathBuf,
    #[arg(long)]
    test: std::path::PathBuf,
    #[arg(long)]
    trials: std::path::PathBuf,
    #[arg(long)]
    out: std::path::PathBuf,
    /// P(same condition | same speaker), jplda only
    #[arg(long, default_value_t = 0.5)]
    p_same_cond_ss: f64,
    /// P(same condition | different speakers), jplda only
    #[arg(long, default_value_t = 0.5)]
    p_same_cond_ds: f64,
    /// Use each trial's same/cross tag instead of the priors (jplda only)
    #[arg(long)]
    known_condition: bool,
    /// Score through the dense reference implementation (slow, small inputs)
    #[arg(long)]
    use_oracle: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    scores: std::path::PathBuf,
    #[arg(long)]
    trials: std::path::PathBuf,
    /// DET curve TSV output
    #[arg(long)]
    out_det: std::path::PathBuf,
    /// Also report same-condition and cross-condition subsets
    #[arg(long)]
    subset_by_condition: bool,
    /// Cross-validated calibration with this many by-speaker splits
    #[arg(long)]
    calibrate_cv: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::InvalidArg(_) => 1,
        Error::Io { .. } | Error::Parse { .. } | Error::Data(_) => 2,
        Error::Numerical(_) => 3,
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                std::process::exit(0);
            }
            eprintln!("{e}");
            std::process::exit(1);
        }
    };

    let threads = cli.threads.max(1);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .expect("thread pool");
    let result = pool.install(|| match cli.command {
        Command::Synth(args) => commands::synth(args),
        Command::Preprocess(args) => commands::preprocess(args),
        Command::Train(args) => commands::train(args),
        Command::Score(args) => commands::score(args),
        Command::Eval(args) => commands::eval(args),
    });
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(exit_code(&e));
    }
}
