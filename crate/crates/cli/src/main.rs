//! `idlab` command-line front end.

mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;

use settings::{Cli, Command};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let command = cli.command;
    let result = settings::resolve(&command).and_then(|cfg| {
        let args = command.args();
        let out = args.out.clone().unwrap_or_else(|| PathBuf::from("runs").join(command.name()));
        let source = args.config.as_deref();
        match &command {
            Command::Forward(_) => commands::forward(&cfg, &out, source),
            Command::Symbols(_) => commands::symbols(&cfg, &out, source),
            Command::Recon(_) | Command::Qpat(_) => commands::recon(&cfg, &out, source),
            Command::Spectrum(_) => commands::spectrum(&cfg, &out, source),
            Command::Oracle(_) => commands::oracle(&cfg, &out, source),
        }
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
