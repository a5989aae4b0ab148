//! Report files: append-only CSV logs and the JSON run manifest.
//!
//! | file          | columns                                                           |
//! |---------------|-------------------------------------------------------------------|
//! | `rounds.csv`  | t, k, p, sigma_eps_sq, tv_est, tv_stderr, eps_u, eps_u_stderr, eps_p, c1t |
//! | `bounds.csv`  | name, t, k, lhs, rhs, stderr, status                              |
//! | `sweep.csv`   | param, value, t, tv, tv_stderr, eps_p, eps_u, eps_u_stderr, c1    |
//!
//! Floats are written with 17 significant digits so they reload bit for bit.
//! Missing round or client indices are empty fields.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::Result;
use crate::federation::ClientMetrics;
use crate::metrics::{BoundEntry, BoundReport, ConstantsRecord, Status};
use crate::suite::SweepRow;

pub const ROUNDS_FILE: &str = "rounds.csv";
pub const BOUNDS_FILE: &str = "bounds.csv";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

pub const ROUNDS_HEADER: [&str; 10] =
    ["t", "k", "p", "sigma_eps_sq", "tv_est", "tv_stderr", "eps_u", "eps_u_stderr", "eps_p", "c1t"];
pub const BOUNDS_HEADER: [&str; 7] = ["name", "t", "k", "lhs", "rhs", "stderr", "status"];
pub const SWEEP_HEADER: [&str; 9] = ["param", "value", "t", "tv", "tv_stderr", "eps_p", "eps_u", "eps_u_stderr", "c1"];

/// 17 significant digits in scientific notation.
pub fn fmt_float(x: f64) -> String {
    format!("{x:.16e}")
}

fn fmt_index(i: Option<usize>) -> String {
    i.map(|i| i.to_string()).unwrap_or_default()
}

pub fn round_row(m: &ClientMetrics) -> Vec<String> {
    vec![
        m.round.to_string(),
        m.client.to_string(),
        fmt_float(m.p),
        fmt_float(m.sigma_eps_sq),
        fmt_float(m.tv.estimate),
        fmt_float(m.tv.stderr),
        fmt_float(m.eps_u.literal),
        fmt_float(m.eps_u.stderr),
        fmt_float(m.eps_p),
        fmt_float(m.c1t),
    ]
}

pub fn bound_row(e: &BoundEntry) -> Vec<String> {
    vec![
        e.name.clone(),
        fmt_index(e.round),
        fmt_index(e.client),
        fmt_float(e.lhs),
        fmt_float(e.rhs),
        fmt_float(e.stderr),
        e.status.as_str().to_string(),
    ]
}

pub fn sweep_row(r: &SweepRow) -> Vec<String> {
    vec![
        r.param.to_string(),
        fmt_float(r.value),
        r.t.to_string(),
        fmt_float(r.tv),
        fmt_float(r.tv_stderr),
        fmt_float(r.eps_p),
        fmt_float(r.eps_u),
        fmt_float(r.eps_u_stderr),
        fmt_float(r.c1),
    ]
}

/// CSV file that is flushed after every record, so an interrupted run
/// leaves a parseable prefix.
pub struct CsvLog {
    writer: csv::Writer<File>,
    path: PathBuf,
}

impl CsvLog {
    pub fn create(path: impl AsRef<Path>, header: &[&str]) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut writer = csv::Writer::from_path(&path)?;
        writer.write_record(header)?;
        writer.flush()?;
        Ok(Self { writer, path })
    }

    pub fn append(&mut self, row: &[String]) -> Result<()> {
        self.writer.write_record(row)?;
        self.writer.flush()?;
        Ok(())
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: impl AsRef<Path>) -> Result<String> {
    let mut buf = Vec::new();
    File::open(path)?.read_to_end(&mut buf)?;
    Ok(sha256_bytes(&buf))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunStatus {
    /// Written before any output; a manifest left in this state marks an
    /// incomplete run.
    Running,
    Complete,
    /// Stopped early by an infeasible budget.
    Aborted,
    Failed,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub entries: usize,
    pub pass: usize,
    pub fail: usize,
    pub out_of_regime: usize,
    /// `name@t/k` of every failing entry.
    pub failing: Vec<String>,
}

impl Summary {
    pub fn of(report: &BoundReport) -> Self {
        Self {
            entries: report.entries.len(),
            pass: report.count(Status::Pass),
            fail: report.count(Status::Fail),
            out_of_regime: report.count(Status::OutOfRegime),
            failing: report.failures().map(describe).collect(),
        }
    }
}

/// `name@t/k`, with `-` for a missing index.
pub fn describe(e: &BoundEntry) -> String {
    let idx = |i: Option<usize>| i.map(|i| i.to_string()).unwrap_or_else(|| "-".into());
    format!("{}@{}/{}", e.name, idx(e.round), idx(e.client))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: String,
    pub config_sha256: String,
    pub config: ExperimentConfig,
    pub output_dir: String,
    pub status: RunStatus,
    pub warnings: Vec<String>,
    /// File name to sha256 of its contents at completion.
    pub artifacts: BTreeMap<String, String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub summary: Option<Summary>,
    /// Constants used per round and client, including any estimate next to
    /// an override.
    pub constants: Vec<ConstantsRecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl RunManifest {
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let path = dir.as_ref().join(MANIFEST_FILE);
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, serde_json::to_string_pretty(self)?)?;
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    /// Records checksums of the named files in `dir`.
    pub fn record_artifacts(&mut self, dir: impl AsRef<Path>, files: &[&str]) -> Result<()> {
        for f in files {
            self.artifacts.insert((*f).to_string(), sha256_file(dir.as_ref().join(f))?);
        }
        Ok(())
    }
}
