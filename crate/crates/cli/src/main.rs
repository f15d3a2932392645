mod args;
mod commands;
mod config;
mod error;
mod io;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};
use config::{CommandKind, RunConfig};
use error::{CliError, CliResult};

fn run(cli: Cli) -> CliResult<serde_json::Value> {
    let (kind, flags) = match &cli.command {
        Command::Balance(f) => (CommandKind::Balance, f),
        Command::Sensitivity(f) => (CommandKind::Sensitivity, f),
        Command::LambdaStar(f) => (CommandKind::LambdaStar, f),
        Command::Amplify(f) => (CommandKind::Amplify, f),
        Command::Simulate(f) => (CommandKind::Simulate, f),
    };
    let env_seed = std::env::var("BALSENS_SEED").ok();
    let cfg = RunConfig::resolve(kind, flags, env_seed.as_deref())?;
    let go = || match kind {
        CommandKind::Balance => commands::balance(&cfg),
        CommandKind::Sensitivity => commands::sensitivity(&cfg),
        CommandKind::LambdaStar => commands::lambda_star(&cfg),
        CommandKind::Amplify => commands::amplify(&cfg),
        CommandKind::Simulate => commands::simulate(&cfg),
    };
    match cfg.workers {
        Some(w) => rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build()
            .map_err(|e| CliError::Config(format!("cannot start {w} workers: {e}")))?
            .install(go),
        None => go(),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
