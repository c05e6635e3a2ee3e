//! `ctxbias` command-line driver.
//!
//! Exit status: 0 success, 1 usage or configuration error, 2 precondition
//! violation, 3 success with an empty result.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "ctxbias", version, about = "Context-conditioned recognition experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Increase log verbosity (repeatable).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
}

#[derive(clap::Args, Debug, Clone)]
pub struct Common {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Overwrite existing outputs.
    #[arg(long)]
    pub force: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the train/dev/test/ood corpus files into the --out directory.
    GenData(Common),
    /// Run one training stage and write a checkpoint.
    Train(Common),
    /// Mine hard-negative preference pairs with a stage-2 checkpoint.
    Mine(Common),
    /// Evaluate checkpoints over the configured grid.
    Eval(Common),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).init();
    let result = match &cli.command {
        Command::GenData(c) => commands::gen_data(c),
        Command::Train(c) => commands::train(c),
        Command::Mine(c) => commands::mine(c),
        Command::Eval(c) => commands::eval(c),
    };
    match result {
        Ok(commands::Outcome::Done) => ExitCode::SUCCESS,
        Ok(commands::Outcome::Empty(msg)) => {
            eprintln!("warning: {msg}");
            ExitCode::from(3)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
