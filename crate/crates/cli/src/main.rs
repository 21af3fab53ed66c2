mod commands;
mod util;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use gskit::coordconv::CoordFeature;
use gskit::pick::Connectivity;
use gskit::scene::Preset;
use gskit::train::{ProposalSource, Variant, ABLATION_DATA_SEED};

use crate::util::CliError;

#[derive(Parser, Debug)]
#[command(name = "gskit", version, about = "Synthetic grasp scenes, depth-aware coordinate maps, training and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// JSON configuration file; command-line flags override its values
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Worker threads for parallel stages
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PresetArg {
    Clutter,
    DepthSeparated,
    WellSeparated,
}

impl From<PresetArg> for Preset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::Clutter => Preset::Clutter,
            PresetArg::DepthSeparated => Preset::DepthSeparated,
            PresetArg::WellSeparated => Preset::WellSeparated,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Test,
    All,
}

fn parse_feature(s: &str) -> Result<CoordFeature, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| format!("unknown feature `{s}` (expected rel, depth_dist, dist25, depth_sim or hha)"))
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic scene containers
    Gen(GenArgs),
    /// Write the coordinate maps of one proposal as 16-bit PGM images
    Encode(EncodeArgs),
    /// Train a model and write a checkpoint and a per-epoch log
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset
    Eval(EvalArgs),
    /// Train and evaluate every coordinate-feature variant over several seeds
    Ablate(AblateArgs),
    /// Score predicted grasps against ground truth
    GraspEval(GraspEvalArgs),
    /// Simulate iterative picking on one scene
    Pick(PickArgs),
}

#[derive(Args, Debug)]
pub struct GenArgs {
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub num: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum)]
    pub preset: Option<PresetArg>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug)]
pub struct EncodeArgs {
    /// Scene container directory
    #[arg(long, value_name = "DIR")]
    pub scene: PathBuf,
    /// Proposal column
    #[arg(long, allow_negative_numbers = true)]
    pub x: f64,
    /// Proposal row
    #[arg(long, allow_negative_numbers = true)]
    pub y: f64,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Relative-coordinate radius in pixels
    #[arg(long)]
    pub radius: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    /// Comma-separated feature groups
    #[arg(long, value_delimiter = ',', value_parser = parse_feature)]
    pub variants: Option<Vec<CoordFeature>>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset directory written by `gen`
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub proposals: Option<usize>,
    /// Relative-coordinate radius in pixels
    #[arg(long)]
    pub radius: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Part of the dataset to train on
    #[arg(long, value_enum, default_value = "train")]
    pub split: Split,
    #[arg(long)]
    pub no_augment: bool,
    #[arg(long, value_enum, default_value = "f32")]
    pub precision: Precision,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub split: Split,
    /// Proposal source: gt or grasp_centers
    #[arg(long)]
    pub proposals: Option<ProposalSource>,
    #[arg(long)]
    pub mask_threshold: Option<f64>,
    #[arg(long, value_enum, default_value = "f32")]
    pub precision: Precision,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Dataset directory; omitted, the depth-separated ablation set is generated
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_values_t = [Variant::None, Variant::Relcc, Variant::Depthcc])]
    pub variants: Vec<Variant>,
    /// Training seeds
    #[arg(long, value_delimiter = ',', default_values_t = [1u64, 2, 3])]
    pub seeds: Vec<u64>,
    /// Seed of the generated dataset
    #[arg(long, default_value_t = ABLATION_DATA_SEED)]
    pub seed: u64,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub radius: Option<f64>,
    #[arg(long, value_enum, default_value = "f32")]
    pub precision: Precision,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug)]
pub struct GraspEvalArgs {
    /// Prediction grasps.jsonl file, or a directory of them
    #[arg(long, value_name = "PATH")]
    pub pred: PathBuf,
    /// Ground-truth grasps.jsonl file, or a directory of them
    #[arg(long, value_name = "PATH")]
    pub gt: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long)]
    pub max_angle: Option<f64>,
    #[arg(long)]
    pub min_iou: Option<f64>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug)]
#[command(group(clap::ArgGroup::new("model").required(true).args(["checkpoint", "oracle"])))]
pub struct PickArgs {
    #[arg(long, value_name = "DIR")]
    pub scene: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub checkpoint: Option<PathBuf>,
    /// Use ground-truth grasps and masks instead of a network
    #[arg(long)]
    pub oracle: bool,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Gripper opening margin in pixels
    #[arg(long)]
    pub margin: Option<f64>,
    #[arg(long)]
    pub connectivity: Option<Connectivity>,
    #[arg(long)]
    pub continuity_ratio: Option<f64>,
    #[arg(long)]
    pub min_score: Option<f64>,
    /// Re-render the scene from its object list after each removal
    #[arg(long, value_enum)]
    pub rerender: Option<PresetArg>,
    #[arg(long, value_enum, default_value = "f32")]
    pub precision: Precision,
    #[command(flatten)]
    pub common: Common,
}

fn run(cli: Cli, argv: &[String]) -> Result<(), CliError> {
    let jobs = match &cli.command {
        Command::Gen(a) => &a.common,
        Command::Encode(a) => &a.common,
        Command::Train(a) => &a.common,
        Command::Eval(a) => &a.common,
        Command::Ablate(a) => &a.common,
        Command::GraspEval(a) => &a.common,
        Command::Pick(a) => &a.common,
    }
    .jobs;
    if jobs == 0 {
        return Err(CliError::flag("--jobs", "must be at least 1"));
    }
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs).build().map_err(|e| CliError::Runtime(e.to_string()))?;
    pool.install(|| match cli.command {
        Command::Gen(a) => commands::gen(a, argv),
        Command::Encode(a) => commands::encode(a, argv),
        Command::Train(a) => commands::train(a, argv),
        Command::Eval(a) => commands::eval(a, argv),
        Command::Ablate(a) => commands::ablate(a, argv),
        Command::GraspEval(a) => commands::grasp_eval(a, argv),
        Command::Pick(a) => commands::pick(a, argv),
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("GSKIT_LOG", "info")).format_timestamp(None).init();
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match run(cli, &argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
