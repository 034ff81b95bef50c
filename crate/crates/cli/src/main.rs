//! `vpr`: batch front end for the hierarchical place-recognition engine.
//!
//! Exit codes: 0 success, 1 usage error (bad flags, config or parameter
//! values), 2 data error (unreadable, malformed or inconsistent inputs).

mod args;
mod commands;
mod manifest;

use std::process::ExitCode;

use clap::Parser;
use vpr_core::VprError;

use crate::args::{Cli, Command};
use crate::commands::{load_config, run, RunContext, UsageError};

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return 1;
        }
        if let Some(VprError::InvalidParameter(_)) = cause.downcast_ref::<VprError>() {
            return 1;
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = (|| {
        let config = load_config(cli.config.as_deref())?;
        let default_threads = match cli.command {
            Command::Bench(_) => 1,
            _ => std::thread::available_parallelism().map_or(1, |n| n.get()),
        };
        let parallelism = cli.threads.unwrap_or(default_threads);
        if parallelism == 0 {
            return Err(UsageError("--threads must be at least 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(parallelism)
            .build_global()?;
        run(
            cli.command,
            &RunContext {
                config,
                parallelism,
            },
        )
    })();

    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
