mod commands;

use std::process::ExitCode;

use clap::Parser;

use commands::Cli;

/// Errors a user can fix (bad input, bad flags, wrong files) exit with 1;
/// everything else is a bug or numerical failure and exits with 2.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<dygkt::Error>() {
            use dygkt::Error as E;
            return match e {
                E::Row { .. }
                | E::EmptyGraph(_)
                | E::UnknownNode { .. }
                | E::OutOfRange { .. }
                | E::Config(_)
                | E::Format(_)
                | E::ConfigMismatch(_)
                | E::Contract(_)
                | E::Io(_)
                | E::Csv(_)
                | E::Json(_) => 1,
                _ => 2,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() || cause.downcast_ref::<commands::UserError>().is_some() {
            return 1;
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
