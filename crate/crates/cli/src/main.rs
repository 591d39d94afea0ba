mod config;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use config::Experiment;

/// Runs one experiment and writes its artifacts to the output directory.
#[derive(Debug, Parser)]
#[command(name = "keyward", version)]
struct Cli {
    #[arg(value_enum)]
    experiment: Experiment,
    /// JSON config file; every field has a default.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config field by dot path, e.g. `attack.framework.n_epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory; falls back to `out_dir` in the config, then
    /// `$KEYWARD_OUT`, then `runs/<experiment>`.
    #[arg(long)]
    out: Option<PathBuf>,
}

const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let cfg = match config::load(cli.config.as_deref(), &cli.overrides) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("config error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    let out_dir = cli
        .out
        .or_else(|| cfg.out_dir.clone())
        .or_else(|| std::env::var_os("KEYWARD_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs").join(cli.experiment.name()));
    let resolved = match cfg.resolve(cli.experiment, out_dir).and_then(|c| run::validate(&c).map(|_| c)) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("config error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    match run::run(&resolved) {
        Ok(summary) => {
            println!("{} = {}", summary.headline_name, summary.headline_value);
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}
