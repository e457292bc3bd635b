//! Batch front door for the switching-game variational-inequality solvers:
//! problem files in, value fields, manifests and reports out.
//!
//! Everything lives in the library so integration tests can drive the
//! commands directly; `main` is a thin dispatcher.

pub mod commands;
pub mod output;
pub mod problem;
pub mod verify;

pub use commands::{cmd_solve, cmd_validate, cmd_verify, parse_cli, EXIT_IO, EXIT_NONCONVERGENCE, EXIT_OK, EXIT_PROPERTY};

/// Parse the argument vector (without the binary name) and run.
pub fn run(argv: &[String]) -> i32 {
    let cli = match commands::parse_cli(argv) {
        Ok(c) => c,
        Err(msg) => {
            eprintln!("{msg}");
            return commands::EXIT_IO;
        }
    };
    match cli.command.as_str() {
        "validate" => commands::cmd_validate(&cli),
        "solve" => commands::cmd_solve(&cli),
        "verify" => commands::cmd_verify(&cli),
        _ => unreachable!("parse_cli rejects unknown subcommands"),
    }
}
