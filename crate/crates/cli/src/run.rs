//! Runs one configured experiment and writes its artifacts.

use serde::Serialize;
use sha2::{Digest, Sha256};
use std::fs;
use std::path::Path;
use std::time::Instant;

use crate::config::ExperimentConfig;
use crate::error::{CliResult, EXIT_NUMERICAL, EXIT_OK};
use crate::experiments::{execute, Check, Outcome};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, Serialize)]
pub struct Versions {
    pub bismut_cli: &'static str,
    pub bismut_core: &'static str,
}

/// Run metadata; the only output that may differ between identical reruns.
#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub experiment: String,
    pub config_sha256: String,
    pub seed: Option<u64>,
    pub versions: Versions,
    pub threads: usize,
    pub wall_time_seconds: f64,
    pub files: Vec<String>,
    pub checks: Vec<Check>,
    pub passed: bool,
}

#[derive(Debug)]
pub struct RunSummary {
    pub exit_code: i32,
    pub outcome: Outcome,
    pub manifest: Manifest,
}

pub fn config_hash(canonical: &str) -> String {
    Sha256::digest(canonical.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Executes the experiment, then writes the effective config, every result table,
/// `checks.csv` and the manifest into `out_dir`. Nothing is written on error.
pub fn run(cfg: &ExperimentConfig, out_dir: &Path) -> CliResult<RunSummary> {
    let canonical = cfg.to_toml_string()?;
    let start = Instant::now();
    let outcome = execute(cfg)?;
    let wall = start.elapsed().as_secs_f64();

    let mut files: Vec<(String, String)> = vec![("config.toml".into(), canonical.clone())];
    files.extend(outcome.files.iter().cloned());
    files.push(("checks.csv".into(), outcome.checks_csv()));
    let manifest = Manifest {
        experiment: cfg.experiment.name().to_string(),
        config_sha256: config_hash(&canonical),
        seed: cfg.sim.as_ref().map(|s| s.seed),
        versions: Versions {
            bismut_cli: env!("CARGO_PKG_VERSION"),
            bismut_core: bismut_core::VERSION,
        },
        threads: rayon::current_num_threads(),
        wall_time_seconds: wall,
        files: files.iter().map(|(n, _)| n.clone()).collect(),
        checks: outcome.checks.clone(),
        passed: outcome.passed(),
    };

    fs::create_dir_all(out_dir)?;
    for (name, contents) in &files {
        fs::write(out_dir.join(name), contents)?;
    }
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| crate::error::CliError::Internal(e.to_string()))?;
    fs::write(out_dir.join(MANIFEST), json + "\n")?;

    let exit_code = if manifest.passed { EXIT_OK } else { EXIT_NUMERICAL };
    Ok(RunSummary {
        exit_code,
        outcome,
        manifest,
    })
}
