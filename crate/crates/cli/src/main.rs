//! Command-line front end for the iterative active/semi-supervised loop.

mod commands;
mod config;
mod error;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "ilm", version, about = "Iterative active learning and semi-supervised training for segmentation")]
pub struct Cli {
    /// Seed for every random choice; overrides the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Worker threads (0 picks the number of cores).
    #[arg(long, global = true, env = "ILM_THREADS")]
    pub threads: Option<usize>,

    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    pub force: bool,

    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// More log output (repeat for debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic source/target dataset.
    Synth(SynthArgs),
    /// Train one stage and write student and teacher checkpoints.
    Train(TrainArgs),
    /// Score images by mean prediction entropy.
    Score(ScoreArgs),
    /// Pick the most uncertain images and export their predictions for correction.
    Select(SelectArgs),
    /// Read corrected Labelme files back into a manifest.
    Ingest(IngestArgs),
    /// Run the full selection and training loop.
    Loop(LoopArgs),
    /// Compute per-class IoU and mIoU.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub feature_dim: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub n_source: Option<usize>,
    #[arg(long)]
    pub n_target: Option<usize>,
    #[arg(long)]
    pub n_eval: Option<usize>,
    /// Target mean shift, in noise standard deviations.
    #[arg(long)]
    pub shift: Option<f64>,
    /// Class-frequency skew between domains.
    #[arg(long)]
    pub skew: Option<f64>,
}

/// Overrides for the training section of the config.
#[derive(Debug, Args, Clone, Default)]
pub struct TrainOverrides {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Drop the unlabeled pseudo-label term.
    #[arg(long)]
    pub no_unsup: bool,
    /// Drop the contrastive term.
    #[arg(long)]
    pub no_contrast: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Labeled manifest; repeat to combine several.
    #[arg(long, required = true)]
    pub labeled: Vec<PathBuf>,
    /// Unlabeled manifest; labels in it are ignored.
    #[arg(long)]
    pub unlabeled: Option<PathBuf>,
    #[arg(long)]
    pub classes: PathBuf,
    /// Starting checkpoint instead of a fresh initialization.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Output directory for student.ilmw, teacher.ilmw and trace.json.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub train: TrainOverrides,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Tab-separated output table.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    /// Score table written by `score`.
    #[arg(long)]
    pub scores: PathBuf,
    /// Image count or percentage such as `1.2%`.
    #[arg(long)]
    pub budget: String,
    /// Pool size percentages refer to; defaults to the number of scored images.
    #[arg(long)]
    pub pool_size: Option<usize>,
    /// Output directory for selected.txt and Labelme predictions.
    #[arg(long)]
    pub out: PathBuf,
    /// Checkpoint used to export predictions; needs --manifest and --classes.
    #[arg(long, requires_all = ["manifest", "classes"])]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub classes: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Manifest holding the images that were annotated.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Directory of corrected `<id>.json` Labelme files.
    #[arg(long)]
    pub corrected: PathBuf,
    #[arg(long)]
    pub classes: PathBuf,
    /// Output manifest; masks go to `labels/` next to it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct LoopArgs {
    /// Labeled source manifest (not needed with --source-free).
    #[arg(long)]
    pub source: Option<PathBuf>,
    /// Unlabeled target pool manifest.
    #[arg(long)]
    pub target: Option<PathBuf>,
    /// Labeled held-out target manifest for evaluation.
    #[arg(long)]
    pub eval: Option<PathBuf>,
    #[arg(long)]
    pub classes: Option<PathBuf>,
    /// Answer selections from this labeled manifest.
    #[arg(long, conflicts_with = "annotation_dir")]
    pub ground_truth: Option<PathBuf>,
    /// Wait for corrected Labelme files in this directory.
    #[arg(long)]
    pub annotation_dir: Option<PathBuf>,
    /// Seconds to wait for corrected files.
    #[arg(long)]
    pub annotation_timeout: Option<f64>,
    /// Per-round budgets, e.g. `1%,1.2%` or `30,36`.
    #[arg(long, value_delimiter = ',')]
    pub rounds: Option<Vec<String>>,
    #[arg(long)]
    pub source_free: bool,
    /// Initial checkpoint.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Output directory; holds the snapshot, checkpoints and report.
    #[arg(long, required_unless_present = "resume")]
    pub out: Option<PathBuf>,
    /// Continue the run stored in this directory.
    #[arg(long, conflicts_with_all = ["out", "init", "rounds", "source_free"])]
    pub resume: Option<PathBuf>,
    /// Selection strategy after the first round.
    #[arg(long, value_parser = ["uncertainty", "random"])]
    pub strategy: Option<String>,
    #[command(flatten)]
    pub train: TrainOverrides,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Labeled ground-truth manifest.
    #[arg(long)]
    pub gt: PathBuf,
    /// Checkpoint to predict with.
    #[arg(long, required_unless_present = "pred", conflicts_with = "pred")]
    pub checkpoint: Option<PathBuf>,
    /// Manifest whose labels are the predictions, matched by id.
    #[arg(long)]
    pub pred: Option<PathBuf>,
    /// Class names for the report.
    #[arg(long)]
    pub classes: Option<PathBuf>,
    /// `19`, `16`, `13`, or a comma-separated list of class indices.
    #[arg(long)]
    pub subset: Option<String>,
    /// Also write the report as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
}

fn report(err: &CliError) -> i32 {
    let line = serde_json::json!({
        "error": err.kind(),
        "code": err.exit_code(),
        "message": err.to_string(),
    });
    eprintln!("{line}");
    err.exit_code()
}

fn main() {
    let cli = Cli::parse();
    init_logging(cli.verbose);
    let code = match commands::run(cli) {
        Ok(()) => 0,
        Err(e) => report(&e),
    };
    std::process::exit(code);
}
