mod commands;
mod config;
mod repro;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{FinetuneArgs, ModelArgs, SynthArgs, TrainArgs};

#[derive(Parser, Debug)]
#[command(name = "tcv2", version = env!("TCV2_VERSION"), about = "Multi-task attention MIL: synthesize, train, fine-tune and evaluate")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic cohort with patient-level splits.
    Synth(SynthCmd),
    /// Train a multi-task model.
    Train(TrainCmd),
    /// Fine-tune aggregation and a new head on a downstream task with the encoder frozen.
    Finetune(FinetuneCmd),
    /// Compute metrics from a predictions file.
    Eval(EvalCmd),
    /// Export attention weights of one slide.
    Attend(AttendCmd),
    /// Estimate training energy and emissions.
    Energy(EnergyCmd),
    /// Report slides held out for one task but trained on by another.
    CheckSplits(CheckSplitsCmd),
}

#[derive(Args, Debug)]
pub struct Common {
    /// Config file with [synth], [model], [train] and [finetune] sections.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SynthCmd {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    synth: SynthArgs,
}

#[derive(Args, Debug)]
pub struct TrainCmd {
    #[arg(long)]
    manifest: PathBuf,
    /// Split file: `slide_id,split` or `slide_id,task_id,split`.
    #[arg(long)]
    splits: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Continue from the state saved in the output directory.
    #[arg(long)]
    resume: bool,
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    train: TrainArgs,
}

#[derive(Args, Debug)]
pub struct FinetuneCmd {
    /// Pretrained checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Downstream manifest.
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    splits: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    finetune: FinetuneArgs,
    #[command(flatten)]
    train: TrainArgs,
}

#[derive(Args, Debug)]
pub struct EvalCmd {
    /// CSV `slide_id,task_id,truth,<pred | score | score_0..score_C-1>`.
    #[arg(long)]
    predictions: PathBuf,
    /// Task registry for class counts; inferred from the data otherwise.
    #[arg(long)]
    tasks: Option<PathBuf>,
    /// Directory for metrics.csv.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AttendCmd {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    slide: String,
    #[arg(long)]
    task: String,
    #[arg(long)]
    out: PathBuf,
    /// Also write a graymap raster of mean attention.
    #[arg(long)]
    raster: bool,
    /// Sample a validation-style bag of this size instead of using every instance.
    #[arg(long)]
    bag: Option<usize>,
    /// Seed for `--bag` sampling.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
pub struct EnergyCmd {
    #[arg(long)]
    hours: f64,
    #[arg(long)]
    watts: f64,
    /// kg CO2 per kWh, or a `low:high` range.
    #[arg(long, default_value = "0.35")]
    intensity: String,
}

#[derive(Args, Debug)]
pub struct CheckSplitsCmd {
    #[arg(long)]
    splits: PathBuf,
    /// Manifest; required for a global `slide_id,split` file.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Task registry; defaults to the one beside the manifest.
    #[arg(long)]
    tasks: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Synth(c) => commands::synth(c),
        Command::Train(c) => commands::train(c),
        Command::Finetune(c) => commands::finetune(c),
        Command::Eval(c) => commands::eval(c),
        Command::Attend(c) => commands::attend(c),
        Command::Energy(c) => commands::energy(c),
        Command::CheckSplits(c) => commands::check_splits(c),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
