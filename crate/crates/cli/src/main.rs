mod args;
mod run;

use std::process::ExitCode;

use clap::Parser;

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<run::UsageError>().is_some() {
        return 2;
    }
    if let Some(e) = err.downcast_ref::<sinkdiag::dump::DumpError>() {
        return if matches!(e, sinkdiag::dump::DumpError::Io(_)) {
            1
        } else {
            2
        };
    }
    match err.downcast_ref::<sinkdiag::Error>() {
        Some(e) if e.is_validation() => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = args::Cli::parse();
    match run::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
