mod commands;
mod config;
mod error;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "fuselearn", version, about = "Multimodal image + tabular fusion toolkit")]
struct Cli {
    /// TOML file with [synth], [train], [model] and [protocol] sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory; every command writes its files here.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,

    /// More log output (repeat for debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic multimodal dataset.
    Synth(SynthArgs),
    /// Train a fusion, image-only or feature-only model.
    Train(TrainArgs),
    /// Evaluate checkpoints under a modality mode.
    Eval(EvalArgs),
    /// Paired McNemar and DeLong tests between two prediction files.
    Compare(CompareArgs),
    /// Grad-CAM overlays for selected subjects.
    Gradcam(GradcamArgs),
    /// Finite-difference check of every differentiable op and the full model.
    Gradcheck(GradcheckArgs),
    /// Multi-seed synthetic reproduction of a results table.
    Experiment(ExperimentArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, env = "FUSELEARN_SEED")]
    pub seed: Option<u64>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub image_size: Option<usize>,
    /// image_dominant | clinical_dominant | complementary
    #[arg(long)]
    pub signal_mode: Option<String>,
    /// Class priors low,intermediate,high.
    #[arg(long, value_delimiter = ',')]
    pub priors: Option<Vec<f64>>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset manifest (manifest.json).
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, env = "FUSELEARN_SEED")]
    pub seed: Option<u64>,
    /// plain | residual | dense
    #[arg(long)]
    pub backbone: Option<String>,
    /// 64 | 128 | native
    #[arg(long)]
    pub img_feat_dim: Option<String>,
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long, conflicts_with = "feature_only")]
    pub image_only: bool,
    #[arg(long)]
    pub feature_only: bool,
    /// Image-only checkpoint whose backbone initializes the fusion model.
    #[arg(long, conflicts_with_all = ["image_only", "feature_only"])]
    pub init_backbone: Option<PathBuf>,
    /// f32 | f64
    #[arg(long)]
    pub precision: Option<String>,
    /// Hyperparameter preset: reference (lr 2e-4, 100 epochs) or desk (lr 1e-2, 20 epochs).
    #[arg(long, default_value = "reference")]
    pub preset: String,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub include_intubation: Option<bool>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, required_unless_present = "aggregate")]
    pub data: Option<PathBuf>,
    /// Checkpoint(s); several are averaged as an ensemble.
    #[arg(long, num_args = 1.., conflicts_with = "ensemble")]
    pub ckpt: Vec<PathBuf>,
    #[arg(long, num_args = 1..)]
    pub ensemble: Vec<PathBuf>,
    /// full | image-only | feature-only | partial:P
    #[arg(long, default_value = "full")]
    pub mode: String,
    /// Split the checkpoint list into R equal runs and report Student-t intervals.
    #[arg(long, default_value_t = 1)]
    pub runs: usize,
    /// Aggregate existing metric reports instead of evaluating.
    #[arg(long, num_args = 1.., conflicts_with_all = ["ckpt", "ensemble"])]
    pub aggregate: Vec<PathBuf>,
    /// train | val | test
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Ensemble weights (default uniform).
    #[arg(long, value_delimiter = ',')]
    pub weights: Option<Vec<f64>>,
    /// Select and store a neutral image in each fusion checkpoint first.
    #[arg(long)]
    pub cache_neutral_image: bool,
    /// Evaluate partial clinical fractions 0, 0.2, ..., 1 instead of one mode.
    #[arg(long)]
    pub sweep: bool,
    /// Seed of the kept-feature sampling in partial modes.
    #[arg(long, env = "FUSELEARN_SEED")]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    pub a: PathBuf,
    pub b: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcamArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Comma-separated subject ids.
    #[arg(long, value_delimiter = ',', required = true)]
    pub subjects: Vec<String>,
    /// full | image-only
    #[arg(long, default_value = "image-only")]
    pub mode: String,
    /// low | intermediate | high | predicted
    #[arg(long, default_value = "predicted")]
    pub class: String,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 20)]
    pub seeds: usize,
    /// Negate the backward rule of the named op (self-test of the checker).
    #[arg(long, hide = true)]
    pub fault: Option<String>,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    /// ensemble | feat-dim | image-only | feature-only | sweep | all
    #[arg(long, default_value = "all")]
    pub preset: String,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
    pub seeds: Vec<u64>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long)]
    pub signal_mode: Option<String>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    /// f32 | f64
    #[arg(long)]
    pub precision: Option<String>,
}

fn main() {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = run(cli);
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let file = config::FileConfig::load(cli.config.as_deref())?;
    std::fs::create_dir_all(&cli.out).map_err(|e| CliError::io(&cli.out, e))?;
    let ctx = commands::Context { file, out: cli.out };
    match cli.command {
        Command::Synth(a) => commands::synth(&ctx, a),
        Command::Train(a) => commands::train(&ctx, a),
        Command::Eval(a) => commands::eval(&ctx, a),
        Command::Compare(a) => commands::compare(&ctx, a),
        Command::Gradcam(a) => commands::gradcam(&ctx, a),
        Command::Gradcheck(a) => commands::gradcheck(&ctx, a),
        Command::Experiment(a) => commands::experiment(&ctx, a),
    }
}
