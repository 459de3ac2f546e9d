//! Command-line driver: argument parsing, the JSON run file and one
//! function per subcommand.

pub mod cli;
pub mod commands;
pub mod config;
pub mod error;

use std::path::PathBuf;

use cli::{Cli, Command};
use commands::Context;
use config::RunConfig;
use error::CliResult;

pub fn run(cli: Cli) -> CliResult<()> {
    let file = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let ctx = Context {
        out_dir: cli.out_dir.or(file.out_dir.clone()).unwrap_or_else(|| PathBuf::from(".")),
        seed: cli.seed.or(file.seed).unwrap_or(0),
        file,
    };
    match cli.command {
        Command::Score(a) => commands::score(&ctx, a),
        Command::Merge(a) => commands::merge(&ctx, a),
        Command::Analyze(a) => commands::analyze(&ctx, a),
        Command::ToyTrain(a) => commands::toy_train(&ctx, a),
        Command::ToyEval(a) => commands::toy_eval(&ctx, a),
        Command::Grid(a) => commands::grid(&ctx, a),
        Command::ToyScenario(a) => commands::toy_scenario(&ctx, a),
    }
}
