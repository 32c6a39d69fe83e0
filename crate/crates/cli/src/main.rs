//! `visex`: every batch stage runs in-process; `label` and `recompute`
//! talk to a running triage service.
//!
//! Exit codes: 0 success, 1 invalid input or arguments, 2 runtime failure.

mod args;
mod commands;

use std::process::ExitCode;

use clap::Parser;
use visex_client::ClientError;

use args::{base_config, Cli, Command};

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<visex_core::error::Error>() {
            return if e.is_validation() { 1 } else { 2 };
        }
        if let Some(e) = cause.downcast_ref::<ClientError>() {
            return if e.is_client_error() || matches!(e, ClientError::Url(_)) { 1 } else { 2 };
        }
    }
    2
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = base_config(&cli)?;
    match cli.command {
        Command::Ingest(a) => commands::ingest(cfg, a),
        Command::Cluster(a) => commands::cluster(cfg, a),
        Command::Serve(a) => commands::serve(cfg, a),
        Command::Filter(a) => commands::filter(cfg, a),
        Command::Repr(a) => commands::repr(cfg, a),
        Command::Train(a) => commands::train(cfg, a),
        Command::Eval(a) => commands::eval(cfg, a),
        Command::Pipeline(a) => commands::pipeline(cfg, a),
        Command::Fixture(a) => commands::fixture(cfg, a),
        Command::Sweep(a) => commands::sweep(cfg, a),
        Command::Label(c) => commands::label(c),
        Command::Recompute(a) => commands::recompute(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
