//! `vdt`: train, sample, predict and evaluate video diffusion transformers.
//!
//! Exit codes: 0 success, 1 other failure, 2 configuration error, 3 non-finite
//! training loss.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use vdt_core::model::CondScheme;
use vdt_core::training::Stage;
use vdt_core::VdtError;

#[derive(Parser)]
#[command(name = "vdt", version, about = "Video diffusion transformer toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the config's training plans, or a single stage of them.
    Train(TrainArgs),
    /// Draw clips from a trained model.
    Sample(SampleArgs),
    /// Predict future frames from observed ones.
    Predict(PredictArgs),
    /// Score predictions on held-out clips, or two directories of clips.
    Eval(EvalArgs),
    /// Train every conditioning scheme under one budget and compare losses.
    CompareCond(CompareArgs),
    /// Write a synthetic dataset as `.vclip` files.
    GenData(GenDataArgs),
    /// Print or export the noise schedule.
    InspectSchedule(ScheduleArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    Spatial,
    Temporal,
    Joint,
}

impl From<StageArg> for Stage {
    fn from(s: StageArg) -> Self {
        match s {
            StageArg::Spatial => Stage::SpatialOnly,
            StageArg::Temporal => Stage::TemporalOnly,
            StageArg::Joint => Stage::Joint,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum CondArg {
    Adaln,
    Xattn,
    Concat,
    None,
}

impl From<CondArg> for CondScheme {
    fn from(c: CondArg) -> Self {
        match c {
            CondArg::Adaln => CondScheme::Adaln,
            CondArg::Xattn => CondScheme::Xattn,
            CondArg::Concat => CondScheme::Concat,
            CondArg::None => CondScheme::None,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Run config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Run seed. Initialisation uses it and plan `i` trains with `seed + 1 + i`.
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Train only this stage, using the config's plan for it.
    #[arg(long, value_enum)]
    stage: Option<StageArg>,
    /// Continue from a checkpoint written by an earlier `train`.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long, value_enum)]
    cond: Option<CondArg>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Sampler seed; defaults to the config's.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 4)]
    n: usize,
    /// Conditioning clip for conditional models; its leading frames are used.
    #[arg(long)]
    cond_clip: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Clip whose leading frames are observed; held-out clips when absent.
    #[arg(long)]
    cond_clip: Option<PathBuf>,
    /// Observed frame count; defaults to the model's conditional frames.
    #[arg(long)]
    observed: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, required_unless_present = "pred")]
    config: Option<PathBuf>,
    #[arg(long, requires = "config")]
    checkpoint: Option<PathBuf>,
    /// Directory of predicted clips, compared with `--truth` by file order.
    #[arg(long, requires = "truth", conflicts_with = "config")]
    pred: Option<PathBuf>,
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = [1u64, 2, 3])]
    seeds: Vec<u64>,
    /// Steps averaged for the final loss.
    #[arg(long, default_value_t = 50)]
    window: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum DataKind {
    BouncingBalls,
    MovingShapes,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    /// Take the generator from a run config's `data` section.
    #[arg(long, conflicts_with = "kind")]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    kind: Option<DataKind>,
    #[arg(long)]
    clips: Option<usize>,
    #[arg(long)]
    frames: Option<usize>,
    /// Frame height and width. Ball radius and speed scale with it.
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Also export every clip as PPM frames.
    #[arg(long)]
    ppm: bool,
}

#[derive(Args)]
struct ScheduleArgs {
    #[arg(long, conflicts_with_all = ["steps", "beta_start", "beta_end"])]
    config: Option<PathBuf>,
    #[arg(long = "T")]
    steps: Option<usize>,
    #[arg(long)]
    beta_start: Option<f64>,
    #[arg(long)]
    beta_end: Option<f64>,
    /// Write every step as CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<VdtError>() {
        Some(VdtError::NonFiniteLoss { .. }) => 3,
        Some(VdtError::InvalidConfig(_) | VdtError::InvalidSchedule(_) | VdtError::Json(_)) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Sample(a) => commands::sample(a),
        Command::Predict(a) => commands::predict(a),
        Command::Eval(a) => commands::eval(a),
        Command::CompareCond(a) => commands::compare_cond(a),
        Command::GenData(a) => commands::gen_data(a),
        Command::InspectSchedule(a) => commands::inspect_schedule(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
