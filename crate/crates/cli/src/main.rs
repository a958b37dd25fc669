use std::path::PathBuf;
use std::process::ExitCode;

use clap::{error::ErrorKind, Parser, ValueEnum};
use focusdec::commands::{cmd_eval, cmd_gen_data, cmd_pretrain, cmd_train_focus};
use focusdec::config::RunConfig;
use focusdec::{CliError, Options};

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Command {
    Pretrain,
    TrainFocus,
    Eval,
    GenData,
}

/// Context extension of a toy decoder by chunked parallel decoding.
#[derive(Debug, Parser)]
#[command(name = "focusdec", version)]
struct Cli {
    #[arg(value_enum)]
    command: Command,
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Output checkpoint, report or corpus.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Evaluation task, or data kind for gen-data.
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    parallel: Option<bool>,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = RunConfig::load(&cli.config)?;
    let opts = Options {
        seed: cli.seed,
        out: cli.out,
        task: cli.task,
        parallel: cli.parallel,
    };
    match cli.command {
        Command::Pretrain => cmd_pretrain(&cfg, &opts),
        Command::TrainFocus => cmd_train_focus(&cfg, &opts),
        Command::Eval => cmd_eval(&cfg, &opts),
        Command::GenData => cmd_gen_data(&cfg, &opts),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
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
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("focusdec: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
