use clap::Parser;
use std::panic;
use std::path::PathBuf;
use std::process::ExitCode;

use bismut_cli::error::EXIT_INTERNAL;
use bismut_cli::{run, CliError, CliResult, ExperimentConfig};

/// Runs one experiment from a TOML config.
#[derive(Debug, Parser)]
#[command(name = "bismut", version)]
struct Args {
    /// Experiment config file.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seed of the [sim] section.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default: the config's `output`, else `results/<experiment>`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; never changes results.
    #[arg(long)]
    threads: Option<usize>,
}

fn load(args: &Args) -> CliResult<ExperimentConfig> {
    let text = std::fs::read_to_string(&args.config)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", args.config.display())))?;
    let mut cfg = ExperimentConfig::from_toml_str(&text)?;
    if let Some(seed) = args.seed {
        match cfg.sim.as_mut() {
            Some(sim) => sim.seed = seed,
            None => return Err(CliError::Config("--seed given but the config has no [sim] section".into())),
        }
    }
    Ok(cfg)
}

fn main_inner(args: Args) -> CliResult<i32> {
    if let Some(n) = args.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Internal(e.to_string()))?;
    }
    let cfg = load(&args)?;
    let out = args
        .out
        .clone()
        .or_else(|| cfg.output.clone())
        .unwrap_or_else(|| PathBuf::from("results").join(cfg.experiment.name()));
    let summary = run(&cfg, &out)?;
    for c in &summary.manifest.checks {
        println!(
            "{} {}: {:e} (threshold {:e})",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.value,
            c.threshold
        );
    }
    println!("wrote {} files to {}", summary.manifest.files.len() + 1, out.display());
    Ok(summary.exit_code)
}

fn main() -> ExitCode {
    let args = Args::parse();
    panic::set_hook(Box::new(|info| {
        let err = CliError::Internal(format!("panic: {info}"));
        eprintln!("{}", err.record());
    }));
    let code = match panic::catch_unwind(|| main_inner(args)) {
        Ok(Ok(code)) => code,
        Ok(Err(e)) => {
            eprintln!("{}", e.record());
            e.exit_code()
        }
        Err(_) => EXIT_INTERNAL,
    };
    ExitCode::from(code as u8)
}
