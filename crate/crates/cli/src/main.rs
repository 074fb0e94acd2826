mod commands;
mod config;

use std::ffi::OsString;
use std::io::Write as _;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;

use commands::{Cli, CliError};

/// Outcome of one command line: what to print where, and the exit status.
struct Invocation {
    code: u8,
    stdout: String,
    stderr: String,
}

fn invoke<I, T>(args: I) -> Invocation
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => Invocation {
                    code: 0,
                    stdout: text,
                    stderr: String::new(),
                },
                _ => Invocation {
                    code: 1,
                    stdout: String::new(),
                    stderr: text,
                },
            };
        }
    };
    match commands::run(cli) {
        Ok(report) => Invocation {
            code: 0,
            stdout: report + "\n",
            stderr: String::new(),
        },
        Err(e) => Invocation {
            code: e.exit_code(),
            stdout: String::new(),
            stderr: format!("error: {e}\n"),
        },
    }
}

fn main() -> ExitCode {
    let run = invoke(std::env::args_os());
    // a closed pipe is not an error
    let _ = std::io::stdout().lock().write_all(run.stdout.as_bytes());
    let _ = std::io::stderr().lock().write_all(run.stderr.as_bytes());
    ExitCode::from(run.code)
}

impl CliError {
    /// 1 usage, 2 data or format, 3 numerical.
    fn exit_code(&self) -> u8 {
        use geonovel::Error as E;
        match self {
            CliError::Usage(_) => 1,
            CliError::Stage { source, .. } => match source {
                E::Config(_) | E::Contract(_) => 1,
                E::Numerical(_) | E::Degenerate(_) => 3,
                _ => 2,
            },
        }
    }
}
