//! Subcommand drivers behind the `ppfl` binary. Each returns a process exit
//! code and writes its files into the output directory.

use std::collections::BTreeMap;
use std::path::Path;

use crate::config::{self, ExperimentConfig};
use crate::error::{Error, Result};
use crate::federation::Federation;
use crate::metrics::BoundReport;
use crate::output::{self, CsvLog, RunManifest, RunStatus, Summary};
use crate::suite;

pub const EXIT_OK: i32 = 0;
pub const EXIT_BOUND_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_INFEASIBLE: i32 = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepParam {
    Noise,
    Budget,
}

impl std::str::FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "noise" => Ok(SweepParam::Noise),
            "budget" => Ok(SweepParam::Budget),
            other => Err(Error::Config(format!("unknown sweep parameter {other:?}, expected noise or budget"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Command {
    Simulate { seed: Option<u64> },
    VerifyBounds,
    Sweep { param: SweepParam, grid: Vec<f64> },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Simulate { .. } => "simulate",
            Command::VerifyBounds => "verify-bounds",
            Command::Sweep { .. } => "sweep",
        }
    }
}

/// Parses a comma-separated list of reals.
pub fn parse_grid(s: &str) -> Result<Vec<f64>> {
    let grid = s
        .split(',')
        .map(|x| {
            x.trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Config(format!("grid value {x:?} is not a finite number")))
        })
        .collect::<Result<Vec<_>>>()?;
    if grid.is_empty() {
        return Err(Error::Config("grid is empty".into()));
    }
    Ok(grid)
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InfeasibleBudget { .. } => EXIT_INFEASIBLE,
        _ => EXIT_CONFIG,
    }
}

/// Loads the config, runs `command` and writes results under `out`.
pub fn run(command: &Command, config_path: &Path, out: &Path) -> i32 {
    let mut config = match config::load_config(config_path) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {}: {e}", config_path.display());
            return EXIT_CONFIG;
        }
    };
    if let Command::Simulate { seed: Some(seed) } = command {
        config.seed = *seed;
        if let Err(e) = config.validate() {
            eprintln!("error: {e}");
            return EXIT_CONFIG;
        }
    }
    if let Command::Sweep { param: SweepParam::Noise, grid } = command {
        if let Some(v) = grid.iter().find(|v| **v < 0.0) {
            eprintln!("error: noise variance {v} is negative");
            return EXIT_CONFIG;
        }
    }
    let config_sha256 = match std::fs::read(config_path) {
        Ok(bytes) => output::sha256_bytes(&bytes),
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_CONFIG;
        }
    };
    if let Err(e) = std::fs::create_dir_all(out) {
        eprintln!("error: cannot create {}: {e}", out.display());
        return EXIT_CONFIG;
    }
    let mut manifest = RunManifest {
        command: command.name().into(),
        config_path: config_path.display().to_string(),
        config_sha256,
        warnings: match command {
            Command::VerifyBounds | Command::Sweep { param: SweepParam::Noise, .. } => config.toy_warnings(),
            _ => config.warnings(),
        },
        config,
        output_dir: out.display().to_string(),
        status: RunStatus::Running,
        artifacts: BTreeMap::new(),
        summary: None,
        constants: Vec::new(),
        error: None,
    };
    for w in &manifest.warnings {
        eprintln!("warning: {w}");
    }
    if let Err(e) = manifest.write(out) {
        eprintln!("error: {e}");
        return EXIT_CONFIG;
    }

    let mut report = BoundReport::new();
    let result = match command {
        Command::Simulate { .. } => simulate(&manifest.config, out, &mut report),
        Command::VerifyBounds => verify(&manifest.config, out, &mut report),
        Command::Sweep { param, grid } => sweep(&manifest.config, *param, grid, out),
    };

    let files: Vec<&str> = match command {
        Command::Simulate { .. } => vec![output::ROUNDS_FILE, output::BOUNDS_FILE],
        Command::VerifyBounds => vec![output::BOUNDS_FILE],
        Command::Sweep { .. } => vec![output::SWEEP_FILE],
    };
    let files: Vec<&str> = files.into_iter().filter(|f| out.join(f).exists()).collect();
    let code = match &result {
        Ok(()) => {
            manifest.status = RunStatus::Complete;
            if report.has_failures() {
                EXIT_BOUND_FAILURE
            } else {
                EXIT_OK
            }
        }
        Err(e) => {
            manifest.status =
                if matches!(e, Error::InfeasibleBudget { .. }) { RunStatus::Aborted } else { RunStatus::Failed };
            manifest.error = Some(e.to_string());
            eprintln!("error: {e}");
            exit_code(e)
        }
    };
    manifest.summary = Some(Summary::of(&report));
    manifest.constants = std::mem::take(&mut report.constants);
    if let Err(e) = manifest.record_artifacts(out, &files).and_then(|_| manifest.write(out)) {
        eprintln!("error: {e}");
        return EXIT_CONFIG;
    }
    if code == EXIT_BOUND_FAILURE {
        eprintln!("{} bound(s) failed:", report.count(crate::metrics::Status::Fail));
        for e in report.failures() {
            eprintln!("  {}  lhs={:e} rhs={:e} stderr={:e}", output::describe(e), e.lhs, e.rhs, e.stderr);
        }
    }
    code
}

fn simulate(config: &ExperimentConfig, out: &Path, report: &mut BoundReport) -> Result<()> {
    let mut rounds = CsvLog::create(out.join(output::ROUNDS_FILE), &output::ROUNDS_HEADER)?;
    let mut bounds = CsvLog::create(out.join(output::BOUNDS_FILE), &output::BOUNDS_HEADER)?;
    let fed = Federation::new(config.clone())?;
    let mut state = fed.initial_state();
    for _ in 0..config.federation.rounds {
        let (done_metrics, done_entries) = (state.metrics.len(), report.entries.len());
        state = fed.run_round(state, report)?;
        for m in &state.metrics[done_metrics..] {
            rounds.append(&output::round_row(m))?;
        }
        for e in &report.entries[done_entries..] {
            bounds.append(&output::bound_row(e))?;
        }
    }
    Ok(())
}

fn verify(config: &ExperimentConfig, out: &Path, report: &mut BoundReport) -> Result<()> {
    let mut bounds = CsvLog::create(out.join(output::BOUNDS_FILE), &output::BOUNDS_HEADER)?;
    *report = suite::verify_bounds(config)?;
    for e in &report.entries {
        bounds.append(&output::bound_row(e))?;
    }
    Ok(())
}

fn sweep(config: &ExperimentConfig, param: SweepParam, grid: &[f64], out: &Path) -> Result<()> {
    let mut log = CsvLog::create(out.join(output::SWEEP_FILE), &output::SWEEP_HEADER)?;
    // One grid value at a time so an infeasible budget keeps the rows before it.
    for v in grid {
        let rows = match param {
            SweepParam::Noise => suite::sweep_noise(config, std::slice::from_ref(v))?,
            SweepParam::Budget => suite::sweep_budget(config, std::slice::from_ref(v))?,
        };
        for r in &rows {
            log.append(&output::sweep_row(r))?;
        }
    }
    Ok(())
}
