mod commands;
mod config;

use std::fmt;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{EvaluateArgs, FinetuneArgs, GenerateArgs, GradcheckArgs, TrainArgs};
use config::Overrides;

/// A failed run: exit code 2 for usage problems, 1 for everything else.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }

    pub fn failure(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<qgen_core::Error> for CliError {
    fn from(e: qgen_core::Error) -> Self {
        Self::failure(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "qgen", version, about = "Query-based question generation and answering")]
struct Cli {
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Cross-entropy pretraining.
    Train(TrainArgs),
    /// Self-critical fine-tuning from a pretrained checkpoint.
    Finetune(FinetuneArgs),
    /// Greedy decoding for every input record.
    Generate(GenerateArgs),
    /// Scores predictions against references.
    Evaluate(EvaluateArgs),
    /// Compares analytic and numeric gradients on a toy model.
    Gradcheck(GradcheckArgs),
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let o = &cli.overrides;
    match &cli.command {
        Command::Train(a) => commands::cmd_train(a, o),
        Command::Finetune(a) => commands::cmd_finetune(a, o),
        Command::Generate(a) => commands::cmd_generate(a, o),
        Command::Evaluate(a) => commands::cmd_evaluate(a, o),
        Command::Gradcheck(a) => commands::cmd_gradcheck(a, o),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code as u8)
        }
    }
}
