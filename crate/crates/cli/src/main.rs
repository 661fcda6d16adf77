mod args;
mod commands;
mod config;
mod error;
mod provenance;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;

use args::{Cli, Command};
use commands::Ctx;
use config::PipelineConfig;
use error::{CliError, CliResult};

fn init_threads() -> CliResult<()> {
    let Ok(value) = std::env::var("MMER_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("MMER_THREADS must be a positive integer, got '{value}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(format!("thread pool: {e}")))
}

fn run(cli: Cli, argv: Vec<String>) -> CliResult<()> {
    init_threads()?;
    let config = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    let ctx = Ctx {
        json: cli.json,
        config,
        argv,
    };
    match &cli.command {
        Command::Extract(a) => commands::extract_cmd(&ctx, a),
        Command::Trim(a) => commands::trim_cmd(&ctx, a),
        Command::Dare(a) => commands::dare_cmd(&ctx, a),
        Command::Merge(a) => commands::merge_cmd(&ctx, a),
        Command::Mask(a) => commands::mask_cmd(&ctx, a),
        Command::Avgmask(a) => commands::avgmask_cmd(&ctx, a),
        Command::Bundle(a) => commands::bundle_cmd(&ctx, a),
        Command::Reconstruct(a) => commands::reconstruct_cmd(&ctx, a),
        Command::Infer(a) => commands::infer_cmd(&ctx, a),
        Command::Stats(s) => commands::stats_cmd(&ctx, s),
        Command::Retention(a) => commands::retention_cmd(&ctx, a),
        Command::Experiment(a) => commands::experiment_cmd(&ctx, a),
        Command::Validate(a) => commands::validate_cmd(&ctx, a),
    }
}

fn main() -> ExitCode {
    let mut argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    argv[0] = "mmer".into();
    match run(cli, argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
