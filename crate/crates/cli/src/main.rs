use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

#[derive(Parser)]
#[command(name = "psformer", version, about = "Salient object detection on 3D point clouds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on synthetic scenes or a directory of labeled PLY files.
    Train(TrainArgs),
    /// Score a checkpoint on labeled data, or run an ablation study with --ablate.
    Eval(EvalArgs),
    /// Write per-point saliency for a PLY file.
    Predict(PredictArgs),
    /// Finite-difference check of every parameter gradient on a 64-point model.
    Gradcheck(GradcheckArgs),
    /// Write synthetic labeled scenes as PLY files.
    GenData(GenDataArgs),
}

/// Options shared by every verb that builds a configuration.
#[derive(Args, Clone, Default)]
pub struct ConfigArgs {
    /// Config file (`key = value` lines); the desk preset when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Sets the init, data and training seeds.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Output directory for train.log and checkpoint.bin.
    #[arg(long, default_value = "run")]
    pub out: PathBuf,
    /// Resume from this checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Components to remove, e.g. `fn,ut`.
    #[arg(long, value_name = "FLAGS")]
    pub ablate: Option<String>,
}

#[derive(Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long, required_unless_present = "ablate")]
    pub checkpoint: Option<PathBuf>,
    /// Labeled PLY file or directory; the synthetic test split when omitted.
    pub data: Option<PathBuf>,
    /// Report file; printed to stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Train and score the full model and each variant without one of these components.
    #[arg(long, value_name = "FLAGS")]
    pub ablate: Option<String>,
}

#[derive(Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Write ASCII instead of binary little-endian.
    #[arg(long)]
    pub ascii: bool,
}

#[derive(Args)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Report file; printed to stdout either way.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Negative control: corrupt the ReLU backward pass.
    #[arg(long, hide = true)]
    pub corrupt_backward: bool,
}

#[derive(Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub out: PathBuf,
    /// Number of scenes; the configured split size when omitted.
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long, value_parser = ["train", "test"], default_value = "train")]
    pub split: String,
    #[arg(long)]
    pub ascii: bool,
}

fn init_logging() -> Result<(), String> {
    let level = std::env::var("PSF_LOG_LEVEL").unwrap_or_else(|_| "info".into());
    let filter = match level.as_str() {
        "error" => log::LevelFilter::Error,
        "info" => log::LevelFilter::Info,
        "debug" => log::LevelFilter::Debug,
        other => return Err(format!("PSF_LOG_LEVEL must be error, info or debug, not `{other}`")),
    };
    env_logger::Builder::new().filter_level(filter).format_timestamp(None).target(env_logger::Target::Stderr).init();
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = init_logging() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    let result = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Predict(a) => commands::predict(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::GenData(a) => commands::gen_data(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
