use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use joint_san::commands;
use joint_san::config::RunConfig;
use joint_san::error::Result;

#[derive(Parser)]
#[command(name = "joint-san", version, about = "Joint span detector and unanswerable-question classifier")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides as `--key value` pairs; they win over the file.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Tokenize, tag and featurize the datasets into the cache.
    Prepare(Common),
    /// Train a model, writing checkpoints and a metrics log.
    Train(Common),
    /// Answer every question of a dataset with a checkpoint.
    Predict(Common),
    /// Score a predictions file against gold answers.
    Evaluate(Common),
    /// Check analytic gradients against finite differences.
    Gradcheck(Common),
}

type Handler = fn(&RunConfig, &mut dyn Write) -> Result<()>;

fn run(cli: Cli) -> Result<()> {
    let (common, handler): (&Common, Handler) = match &cli.command {
        Command::Prepare(c) => (c, |cfg, out| commands::prepare(cfg, out).map(drop)),
        Command::Train(c) => (c, |cfg, out| commands::train(cfg, out).map(drop)),
        Command::Predict(c) => (c, |cfg, out| commands::predict_cmd(cfg, out).map(drop)),
        Command::Evaluate(c) => (c, |cfg, out| commands::evaluate_cmd(cfg, out).map(drop)),
        Command::Gradcheck(c) => (c, |cfg, out| commands::gradcheck_cmd(cfg, out).map(drop)),
    };
    let cfg = RunConfig::load(common.config.as_deref(), &common.overrides)?;
    handler(&cfg, &mut std::io::stdout().lock())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
