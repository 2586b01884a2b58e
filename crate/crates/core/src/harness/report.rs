use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::Serialize;
use serde_json::Value;

use crate::error::{Error, Result};
use crate::federation::{RoundReport, Split};

pub const METRICS_HEADER: [&str; 8] = [
    "round",
    "algorithm",
    "client_id",
    "split",
    "mode",
    "accuracy",
    "loss",
    "wall_ms",
];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub version: String,
    pub config: Value,
    pub final_round: usize,
    pub clients: usize,
    /// Mean test accuracy over clients at the final round, per mode.
    pub final_accuracy: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Value::is_null")]
    pub extra: Value,
}

fn ensure_dir(out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    Ok(())
}

/// Per-mode mean test accuracy over the rows of the last round.
pub fn final_accuracy(reports: &[RoundReport]) -> BTreeMap<String, f64> {
    let last = reports.iter().map(|r| r.round).max().unwrap_or(0);
    let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for r in reports.iter().filter(|r| r.round == last && r.split == Split::Test) {
        let e = acc.entry(r.mode.name().to_string()).or_default();
        e.0 += r.accuracy;
        e.1 += 1;
    }
    acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}

pub fn write_metrics(reports: &[RoundReport], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(METRICS_HEADER)?;
    for r in reports {
        w.write_record([
            r.round.to_string(),
            r.algorithm.name().to_string(),
            r.client_id.to_string(),
            r.split.name().to_string(),
            r.mode.name().to_string(),
            r.accuracy.to_string(),
            r.loss.to_string(),
            r.wall_ms.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `metrics.csv` and `summary.json` into `out`.
pub fn emit_reports(reports: &[RoundReport], config: &Value, extra: Value, out: &Path) -> Result<Summary> {
    if reports.is_empty() {
        return Err(Error::InvalidArgument("no reports to write".into()));
    }
    ensure_dir(out)?;
    write_metrics(reports, &out.join("metrics.csv"))?;
    let summary = Summary {
        version: crate::VERSION.to_string(),
        config: config.clone(),
        final_round: reports.iter().map(|r| r.round).max().unwrap_or(0),
        clients: reports.iter().map(|r| r.client_id).max().map_or(0, |m| m + 1),
        final_accuracy: final_accuracy(reports),
        extra,
    };
    write_json(&summary, &out.join("summary.json"))?;
    Ok(summary)
}

pub fn write_json<S: Serialize>(value: &S, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        ensure_dir(dir)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}
