mod commands;
mod config;
mod data;
mod examples;
mod failure;

use std::process::ExitCode;

use clap::Parser;

use config::{Cli, Command, Settings};
use failure::Failure;

fn run(cli: &Cli) -> Result<(), Failure> {
    let settings = Settings::resolve(&cli.common, &cli.command)?;
    if let Some(n) = settings.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::input(format!("cannot configure {n} threads: {e}")))?;
    }
    match cli.command {
        Command::Fit { .. } => commands::fit(&settings),
        Command::Path { .. } => commands::path(&settings),
        Command::Df { .. } => commands::df(&settings),
        Command::Simulate => commands::simulate(&settings),
        Command::Search { .. } => commands::search(&settings),
        Command::Examples => examples::examples(&settings),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code as u8)
        }
    }
}
