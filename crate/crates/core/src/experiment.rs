//! Monte-Carlo orchestration, run artifacts and paired comparisons.
//!
//! A run directory holds the resolved `config.toml`, one `run_<seed>.csv`
//! log per Monte-Carlo run, `metrics.json` and `manifest.json`. The manifest
//! carries hashes of the config and of its scenario section; only
//! directories with equal scenario hashes share their realized noise and
//! disturbances, so [`compare`] refuses anything else.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::sim::{compute_metrics, run_closed_loop, Metrics, RunLog, StepRecord};

pub const THREADS_ENV: &str = "RDPC_THREADS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbortRecord {
    pub seed: u64,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub controller: String,
    pub config_hash: String,
    pub scenario_hash: String,
    pub seeds: Vec<u64>,
    pub build: String,
    pub aborted: Vec<AbortRecord>,
    pub artifacts: Vec<ArtifactEntry>,
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub logs: Vec<RunLog>,
    pub metrics: Metrics,
}

impl ExperimentResult {
    pub fn aborted(&self) -> Vec<AbortRecord> {
        self.logs
            .iter()
            .filter_map(|l| {
                l.aborted.as_ref().map(|r| AbortRecord {
                    seed: l.seed,
                    reason: r.clone(),
                })
            })
            .collect()
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

pub fn config_hash(cfg: &ExperimentConfig) -> String {
    sha256_hex(cfg.to_toml().as_bytes())
}

/// Hash of everything that determines the realized plant, noise and
/// disturbance streams.
pub fn scenario_hash(cfg: &ExperimentConfig) -> String {
    sha256_hex(toml::to_string(&cfg.scenario).expect("scenario serializes").as_bytes())
}

/// Worker count from `RDPC_THREADS`, or rayon's default when unset.
pub fn thread_count() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(Some(n)),
            _ => Err(Error::config(
                THREADS_ENV,
                format!("expected a positive integer, got `{v}`"),
            )),
        },
    }
}

/// Runs every Monte-Carlo seed. Logs come back in seed order regardless of
/// the worker count.
pub fn run_experiment(cfg: &ExperimentConfig, threads: Option<usize>) -> Result<ExperimentResult> {
    cfg.validate()?;
    let spec = cfg.controller();
    let scenarios = cfg
        .seeds()
        .into_iter()
        .map(|s| cfg.scenario(s))
        .collect::<Result<Vec<_>>>()?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::Parameter(format!("thread pool: {e}")))?;
    let logs = pool.install(|| {
        scenarios
            .par_iter()
            .map(|sc| run_closed_loop(sc, &spec))
            .collect::<Result<Vec<RunLog>>>()
    })?;
    let recs: Vec<&[StepRecord]> = logs.iter().map(|l| l.records.as_slice()).collect();
    let aborted = logs.iter().filter(|l| l.aborted.is_some()).count();
    let metrics = compute_metrics(&recs, aborted);
    Ok(ExperimentResult { logs, metrics })
}

pub fn log_file_name(seed: u64) -> String {
    format!("run_{seed:06}.csv")
}

/// Writes logs, metrics, the resolved config and the manifest into `dir`.
pub fn write_artifacts(cfg: &ExperimentConfig, result: &ExperimentResult, dir: &Path) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    let mut artifacts = Vec::new();
    let mut put = |name: String, bytes: Vec<u8>| -> Result<()> {
        fs::write(dir.join(&name), &bytes)?;
        artifacts.push(ArtifactEntry {
            file: name,
            sha256: sha256_hex(&bytes),
        });
        Ok(())
    };
    put("config.toml".into(), cfg.to_toml().into_bytes())?;
    for log in &result.logs {
        let mut buf = Vec::new();
        log.write_csv(&mut buf)?;
        put(log_file_name(log.seed), buf)?;
    }
    let metrics = serde_json::to_vec_pretty(&result.metrics).map_err(|e| Error::Parse(e.to_string()))?;
    put("metrics.json".into(), metrics)?;
    let manifest = Manifest {
        controller: cfg.controller.kind.name().into(),
        config_hash: config_hash(cfg),
        scenario_hash: scenario_hash(cfg),
        seeds: cfg.seeds(),
        build: format!("{} {}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION")),
        aborted: result.aborted(),
        artifacts,
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Parse(e.to_string()))?;
    fs::write(dir.join("manifest.json"), text)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(dir.join("manifest.json"))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", dir.display())))
}

/// Loads the config stored next to a manifest and checks its hash.
pub fn config_from_run_dir(dir: &Path) -> Result<ExperimentConfig> {
    let manifest = read_manifest(dir)?;
    let cfg = ExperimentConfig::from_toml(&fs::read_to_string(dir.join("config.toml"))?, &[])?;
    if config_hash(&cfg) != manifest.config_hash {
        return Err(Error::Parse(format!(
            "{}: config.toml does not match the manifest hash",
            dir.display()
        )));
    }
    Ok(cfg)
}

/// Recomputes metrics from the CSV logs listed in a manifest.
pub fn metrics_from_logs(dir: &Path) -> Result<Metrics> {
    let manifest = read_manifest(dir)?;
    let mut all = Vec::new();
    for seed in &manifest.seeds {
        let (records, ..) = RunLog::read_records(fs::File::open(dir.join(log_file_name(*seed)))?)?;
        all.push(records);
    }
    let recs: Vec<&[StepRecord]> = all.iter().map(|r| r.as_slice()).collect();
    Ok(compute_metrics(&recs, manifest.aborted.len()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub label: String,
    pub metrics: Metrics,
}

/// Rows of a paired comparison. Fails unless every directory has the same
/// scenario hash.
pub fn compare(dirs: &[PathBuf]) -> Result<Vec<ComparisonRow>> {
    if dirs.is_empty() {
        return Err(Error::Parameter("compare needs at least one run directory".into()));
    }
    let mut rows = Vec::new();
    let mut reference: Option<(String, PathBuf)> = None;
    for dir in dirs {
        let m = read_manifest(dir)?;
        match &reference {
            None => reference = Some((m.scenario_hash.clone(), dir.clone())),
            Some((h, first)) if *h != m.scenario_hash => {
                return Err(Error::Unpaired(format!(
                    "{} and {} were run on different scenarios (hash {} vs {})",
                    first.display(),
                    dir.display(),
                    &h[..12],
                    &m.scenario_hash[..12]
                )))
            }
            _ => {}
        }
        rows.push(ComparisonRow {
            label: format!("{} ({})", m.controller, dir.display()),
            metrics: metrics_from_logs(dir)?,
        });
    }
    Ok(rows)
}

/// Plain-text table: one row per controller, one violation column per
/// output channel.
pub fn format_table(rows: &[ComparisonRow]) -> String {
    let n_y = rows
        .iter()
        .map(|r| r.metrics.per_channel_violation_rate.len())
        .max()
        .unwrap_or(0);
    let width = rows
        .iter()
        .map(|r| r.label.len())
        .max()
        .unwrap_or(0)
        .max("controller".len());
    let mut out = String::new();
    let _ = write!(out, "{:<width$}  {:>9}", "controller", "violation");
    for a in 1..=n_y {
        let _ = write!(out, "  {:>9}", format!("viol_y{a}"));
    }
    let _ = writeln!(out, "  {:>10}  {:>10}  {:>7}", "energy", "track_err", "aborted");
    for r in rows {
        let m = &r.metrics;
        let _ = write!(out, "{:<width$}  {:>9.4}", r.label, m.violation_rate);
        for a in 0..n_y {
            let _ = write!(
                out,
                "  {:>9.4}",
                m.per_channel_violation_rate.get(a).copied().unwrap_or(f64::NAN)
            );
        }
        let err = if m.mean_abs_tracking_error.is_empty() {
            0.0
        } else {
            m.mean_abs_tracking_error.iter().sum::<f64>() / m.mean_abs_tracking_error.len() as f64
        };
        let _ = writeln!(out, "  {:>10.4}  {:>10.4}  {:>7}", m.energy_mean, err, m.aborted_runs);
    }
    out
}
