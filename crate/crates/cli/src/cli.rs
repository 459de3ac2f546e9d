use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "ledmerge", version, about = "Locate / elect / disjoint model merging")]
pub struct Cli {
    /// JSON run file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Directory for all outputs (default: current directory).
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Importance maps of a fine-tuned model and of the base, per dataset.
    Score(ScoreArgs),
    /// Merge fine-tuned checkpoints into the base.
    Merge(MergeArgs),
    /// Per-tensor Jaccard overlap of two importance maps.
    Analyze(AnalyzeArgs),
    /// Train a toy model on a dataset.
    ToyTrain(TrainArgs),
    /// Accuracy of a toy model on datasets.
    ToyEval(EvalArgs),
    /// Sweep LED ratios and lambdas over toy models.
    Grid(GridArgs),
    /// Write the two-task interference benchmark to disk.
    ToyScenario(ScenarioArgs),
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    /// Fine-tuned toy model.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Base toy model; scored on the same datasets.
    #[arg(long)]
    pub base: Option<PathBuf>,
    #[arg(long = "dataset")]
    pub datasets: Vec<PathBuf>,
    /// snip, wanda, magnitude or random.
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long)]
    pub max_examples: Option<usize>,
}

#[derive(Debug, Args)]
pub struct MergeArgs {
    /// led, task_arithmetic, ties, breadcrumbs or uniform_average.
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long)]
    pub base: Option<PathBuf>,
    /// One per task, in task order.
    #[arg(long = "fine")]
    pub fines: Vec<PathBuf>,
    #[arg(long = "name")]
    pub names: Vec<String>,
    /// Imported score map of each fine-tuned model.
    #[arg(long = "fine-scores")]
    pub fine_scores: Vec<PathBuf>,
    /// Imported score map of the base, one per task.
    #[arg(long = "base-scores")]
    pub base_scores: Vec<PathBuf>,
    /// Location dataset per task, for scoring toy models on the fly.
    #[arg(long = "dataset")]
    pub datasets: Vec<PathBuf>,
    /// Scoring method used with --dataset.
    #[arg(long)]
    pub location: Option<String>,
    /// Mask ratio per task; a single value applies to all.
    #[arg(long = "ratio")]
    pub ratios: Vec<f64>,
    /// LED scaling per task; a single value applies to all.
    #[arg(long = "lambda")]
    pub lambdas: Vec<f64>,
    /// both, base_only or fine_only (or 11, 10, 01).
    #[arg(long)]
    pub election: Option<String>,
    /// per_tensor or global.
    #[arg(long)]
    pub granularity: Option<String>,
    /// Tensor name globs left at base values.
    #[arg(long)]
    pub exclude: Vec<String>,
    /// Baseline scaling.
    #[arg(long)]
    pub baseline_lambda: Option<f64>,
    #[arg(long)]
    pub trim_keep_ratio: Option<f64>,
    #[arg(long)]
    pub top_mask_ratio: Option<f64>,
    #[arg(long)]
    pub keep_ratio: Option<f64>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub map_a: Option<PathBuf>,
    #[arg(long)]
    pub map_b: Option<PathBuf>,
    #[arg(long)]
    pub ratio: Option<f64>,
    #[arg(long)]
    pub attention_pattern: Option<String>,
    #[arg(long)]
    pub mlp_pattern: Option<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Starting model; otherwise a fresh one is built from --sizes.
    #[arg(long)]
    pub base: Option<PathBuf>,
    /// Layer widths, input first and classes last.
    #[arg(long, value_delimiter = ',')]
    pub sizes: Vec<usize>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long = "dataset")]
    pub datasets: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GridArgs {
    #[arg(long)]
    pub base: Option<PathBuf>,
    #[arg(long = "fine")]
    pub fines: Vec<PathBuf>,
    #[arg(long = "name")]
    pub names: Vec<String>,
    /// Location dataset per task.
    #[arg(long = "dataset")]
    pub datasets: Vec<PathBuf>,
    /// Held-out dataset per task (defaults to the location datasets).
    #[arg(long = "eval")]
    pub evals: Vec<PathBuf>,
    /// Comma-separated candidate ratios for one task; repeat per task.
    #[arg(long = "ratios")]
    pub ratios: Vec<String>,
    /// Comma-separated candidate lambdas shared by all tasks.
    #[arg(long, value_delimiter = ',')]
    pub lambdas: Vec<f64>,
    #[arg(long)]
    pub location: Option<String>,
    #[arg(long)]
    pub election: Option<String>,
}

#[derive(Debug, Args)]
pub struct ScenarioArgs {
    /// Fraction of each task's features that is shared.
    #[arg(long)]
    pub overlap: Option<f64>,
    /// Also train and write the two specialists.
    #[arg(long)]
    pub train: bool,
}
