//! File formats and run plumbing shared by the command-line tool and tests:
//! config loading with overrides, snapshot and metrics CSVs, the manifest.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use ndarray::Array2;
use serde::Serialize;
use serde_json::Value;

use crate::engine::{MetricRow, RunArtifacts, RunConfig, Snapshot};
use crate::error::{Error, Result};
use crate::oracle::SimulationRow;

pub const SNAPSHOT_FILE: &str = "snapshots.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CONFIG_FILE: &str = "config.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SIMULATION_FILE: &str = "boundary_simulation.csv";
pub const SUMMARY_FILE: &str = "boundary_summary.json";

/// Sets `path` (dot-separated) in a JSON object, creating objects on the way.
fn set_path(root: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut node = root;
    let keys: Vec<&str> = path.split('.').collect();
    for (i, key) in keys.iter().enumerate() {
        if key.is_empty() {
            return Err(Error::Config(format!("empty key in override path `{path}`")));
        }
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("override `{path}`: `{}` is not an object", keys[..i].join("."))))?;
        if i + 1 == keys.len() {
            obj.insert((*key).to_string(), value);
            return Ok(());
        }
        node = obj.entry(key.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}

/// Applies `key=value` overrides; values are parsed as JSON, falling back to
/// a plain string.
pub fn apply_overrides(doc: &mut Value, overrides: &[String]) -> Result<()> {
    for o in overrides {
        let (key, raw) = o.split_once('=').ok_or_else(|| Error::Config(format!("override `{o}` is not of the form key=value")))?;
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        set_path(doc, key.trim(), value)?;
    }
    Ok(())
}

/// Parses a config document after overrides and validates it. Schema
/// errors name the offending field.
pub fn parse_config(text: &str, overrides: &[String]) -> Result<RunConfig> {
    let mut doc: Value = serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid JSON: {e}")))?;
    apply_overrides(&mut doc, overrides)?;
    let config: RunConfig = serde_json::from_value(doc).map_err(|e| Error::Config(e.to_string()))?;
    config.validate()?;
    Ok(config)
}

pub fn load_config(path: &Path, overrides: &[String]) -> Result<RunConfig> {
    parse_config(&fs::read_to_string(path)?, overrides)
}

/// 17 significant digits: parses back to the identical `f64`.
pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn snapshot_header(dim: usize) -> Vec<String> {
    let mut h = vec!["iter".to_string(), "particle".to_string()];
    h.extend((0..dim).map(|j| format!("x{j}")));
    h
}

pub fn write_snapshots(path: &Path, snapshots: &[Snapshot]) -> Result<()> {
    let dim = snapshots.first().map_or(0, |s| s.positions.ncols());
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(snapshot_header(dim))?;
    for snap in snapshots {
        for (i, row) in snap.positions.rows().into_iter().enumerate() {
            let mut rec = vec![snap.iteration.to_string(), i.to_string()];
            rec.extend(row.iter().map(|v| format_f64(*v)));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn malformed(line: u64, message: impl Into<String>) -> Error {
    Error::Malformed { line, message: message.into() }
}

/// Parses a snapshot CSV; errors carry the 1-based file line.
pub fn read_snapshots(path: &Path) -> Result<Vec<Snapshot>> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_path(path)?;
    let header = r.headers()?.clone();
    let dim = header.len().checked_sub(2).filter(|d| *d > 0).ok_or_else(|| malformed(1, "header needs iter,particle,x0,..."))?;
    let expected = snapshot_header(dim);
    if header.iter().ne(expected.iter().map(String::as_str)) {
        return Err(malformed(1, format!("header must be `{}`", expected.join(","))));
    }
    let mut snapshots: Vec<(usize, Vec<f64>)> = Vec::new();
    for (k, rec) in r.records().enumerate() {
        let line = k as u64 + 2;
        let rec = rec.map_err(|e| malformed(line, e.to_string()))?;
        if rec.len() != dim + 2 {
            return Err(malformed(line, format!("expected {} fields, found {}", dim + 2, rec.len())));
        }
        let iter: usize = rec[0].trim().parse().map_err(|_| malformed(line, format!("bad iteration `{}`", &rec[0])))?;
        rec[1].trim().parse::<usize>().map_err(|_| malformed(line, format!("bad particle index `{}`", &rec[1])))?;
        let mut values = Vec::with_capacity(dim);
        for field in rec.iter().skip(2) {
            values.push(field.trim().parse::<f64>().map_err(|_| malformed(line, format!("bad number `{field}`")))?);
        }
        match snapshots.last_mut() {
            Some((it, data)) if *it == iter => data.extend(values),
            _ => snapshots.push((iter, values)),
        }
    }
    snapshots
        .into_iter()
        .map(|(iteration, data)| {
            let n = data.len() / dim;
            let positions = Array2::from_shape_vec((n, dim), data).map_err(|e| Error::ShapeMismatch(e.to_string()))?;
            Ok(Snapshot { iteration, positions })
        })
        .collect()
}

/// Positions at the largest iteration in a snapshot CSV.
pub fn read_points(path: &Path) -> Result<Array2<f64>> {
    read_snapshots(path)?
        .into_iter()
        .max_by_key(|s| s.iteration)
        .map(|s| s.positions)
        .ok_or_else(|| malformed(2, "snapshot file has no rows"))
}

fn opt(v: Option<f64>) -> String {
    v.map(format_f64).unwrap_or_default()
}

pub fn write_metrics(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["iter", "rsd_loss", "ratio_out", "w2_sinkhorn", "energy"])?;
    for m in rows {
        w.write_record([m.iter.to_string(), opt(m.rsd_loss), format_f64(m.ratio_out), opt(m.w2_sinkhorn), opt(m.energy)])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_simulation(path: &Path, rows: &[SimulationRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["N", "h", "trial", "estimate", "true_value", "squared_error"])?;
    for r in rows {
        w.write_record([
            r.n.to_string(),
            format_f64(r.h),
            r.trial.to_string(),
            format_f64(r.estimate),
            format_f64(r.true_value),
            format_f64(r.squared_error),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// An emitted file with its size.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FileEntry {
    pub path: String,
    pub bytes: u64,
}

/// Written last; its presence marks a completed command.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentManifest {
    pub command: String,
    pub config: Value,
    pub build: String,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub files: Vec<FileEntry>,
}

pub fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

pub fn build_id() -> String {
    let profile = if cfg!(debug_assertions) { "debug" } else { "release" };
    format!("{} {} ({profile})", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION"))
}

/// Lists `files` (relative to `dir`) and writes the manifest.
pub fn write_manifest(dir: &Path, command: &str, config: Value, started_unix: f64, files: &[&str]) -> Result<PathBuf> {
    let files = files
        .iter()
        .map(|f| Ok(FileEntry { path: (*f).to_string(), bytes: fs::metadata(dir.join(f))?.len() }))
        .collect::<Result<Vec<_>>>()?;
    let manifest =
        ExperimentManifest { command: command.into(), config, build: build_id(), started_unix, finished_unix: unix_now(), files };
    let path = dir.join(MANIFEST_FILE);
    write_json(&path, &manifest)?;
    Ok(path)
}

/// Writes config, snapshots and metrics for a finished run, then the manifest.
pub fn write_run(dir: &Path, config: &RunConfig, artifacts: &RunArtifacts, started_unix: f64) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    write_json(&dir.join(CONFIG_FILE), config)?;
    write_snapshots(&dir.join(SNAPSHOT_FILE), &artifacts.snapshots)?;
    write_metrics(&dir.join(METRICS_FILE), &artifacts.metrics)?;
    write_manifest(dir, "run", serde_json::to_value(config)?, started_unix, &[CONFIG_FILE, SNAPSHOT_FILE, METRICS_FILE])
}
