//! The `thinrecon` command line: `prep`, `poses`, `reconstruct`, `evaluate`
//! and `colmap-script`.
//!
//! Exit codes: 0 success, 2 usage error, 3 input or parse error, 4 numerical
//! failure during training.

use std::ffi::OsString;
use std::fmt;

use clap::Parser;

pub mod args;
pub mod commands;
pub mod config;

use args::{Cli, Command};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_INPUT: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    pub fn input(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_INPUT,
            message: message.into(),
        }
    }

    pub fn numeric(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_NUMERIC,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

macro_rules! input_error_from {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::input(e.to_string())
            }
        }
    )*};
}

input_error_from!(
    thinrecon::ColmapError,
    thinrecon::scene_file::SceneFileError,
    thinrecon::dataprep::PrepError,
    thinrecon::meshkit::MeshError
);

pub type Result<T> = std::result::Result<T, CliError>;

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return EXIT_USAGE;
        }
        pool = pool.num_threads(n);
    }
    let pool = match pool.build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start worker threads: {e}");
            return EXIT_USAGE;
        }
    };
    match pool.install(|| dispatch(&cli.command)) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}

fn dispatch(command: &Command) -> Result<()> {
    match command {
        Command::Prep(a) => commands::prep::run(a),
        Command::Poses(a) => commands::poses::run(a),
        Command::Reconstruct(a) => commands::reconstruct::run(a),
        Command::Evaluate(a) => commands::evaluate::run(a),
        Command::ColmapScript(a) => commands::script::run(a),
    }
}
