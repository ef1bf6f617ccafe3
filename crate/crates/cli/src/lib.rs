//! Command implementations behind the `rope-probe` binary.

pub mod args;
pub mod commands;
pub mod manifest;
pub mod svg;

use args::{Cli, Command};
use rope_probe_core::{Error, Result};

/// Process exit code for a failed command: 3 for numeric failures, 4 for
/// I/O and file-format failures, 2 for anything the caller asked for
/// that cannot be done.
pub fn exit_code(e: &Error) -> i32 {
    if e.is_numeric() {
        3
    } else if e.is_io() {
        4
    } else {
        2
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let threads = cli.threads.max(1);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    pool.install(|| match &cli.command {
        Command::Train(a) => commands::train(a, threads),
        Command::Analyze(a) => commands::analyze(a),
        Command::MaskFit(a) => commands::mask_fit(a),
        Command::HeadScore(a) => commands::head_score(a),
        Command::ReproduceFig1(a) => commands::reproduce_fig1(a, threads),
    })
}
