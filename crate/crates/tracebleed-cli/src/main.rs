use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use tracebleed_cli::{run_stage, Config, Stage};

/// Privacy benchmark pipeline for synthetic packet traces: membership
/// inference, fidelity scoring, and obfuscation, staged over a run
/// directory keyed by the config hash.
#[derive(Debug, Parser)]
#[command(name = "tracebleed", version)]
struct Cli {
    /// Pipeline configuration (TOML).
    #[arg(long, short)]
    config: PathBuf,

    /// Root directory for runs (falls back to $TRACEBLEED_CACHE_DIR, then
    /// the config's run.out_dir).
    #[arg(long)]
    out_dir: Option<PathBuf>,

    /// Config overrides, dotted keys: --set train.epochs=3
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,

    /// Stage to execute.
    #[arg(value_enum)]
    stage: Stage,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let config = match Config::load(&cli.config, &cli.sets) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match run_stage(cli.stage, &config, cli.out_dir.as_deref()) {
        Ok(run_dir) => {
            println!("{}: ok ({})", cli.stage.name(), run_dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}: {e}", cli.stage.name());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
