use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Method, MissingSpec};
use crate::error::{Error, Result};

/// Files written by [`emit_report`], in write order.
pub const REPORT_FILES: [&str; 4] = ["results.csv", "aggregate.json", "plot_data.csv", "report.json"];

/// One accuracy from one (method, regime, fold, seed) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub method: Method,
    pub regime_mode: String,
    pub regime_value: usize,
    pub fold: usize,
    pub seed: u64,
    pub acc: f64,
}

impl EvalRow {
    pub fn new(method: Method, regime: MissingSpec, fold: usize, seed: u64, acc: f64) -> Self {
        EvalRow {
            method,
            regime_mode: regime.mode_name().to_string(),
            regime_value: regime.value(),
            fold,
            seed,
            acc,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub method: Method,
    pub regime_mode: String,
    pub regime_value: usize,
    pub mean_acc: f64,
    pub runs: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    /// Echo of the experiment configuration.
    pub config: serde_json::Value,
    /// SHA-256 over every test mask in evaluation order.
    pub masks_digest: String,
    pub dataset: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub meta: ReportMeta,
    pub rows: Vec<EvalRow>,
    pub aggregate: Vec<AggregateRow>,
}

impl EvalReport {
    /// Averages rows per (method, regime); groups are ordered by regime as
    /// first seen, then by method.
    pub fn new(rows: Vec<EvalRow>, meta: ReportMeta) -> Result<Self> {
        let mut regimes: Vec<(String, usize)> = Vec::new();
        let mut sums: BTreeMap<(usize, Method), (f64, usize)> = BTreeMap::new();
        for r in &rows {
            if !(0.0..=100.0).contains(&r.acc) {
                return Err(Error::input(format!("accuracy {} outside [0, 100]", r.acc)));
            }
            let key = (r.regime_mode.clone(), r.regime_value);
            let ri = match regimes.iter().position(|k| *k == key) {
                Some(i) => i,
                None => {
                    regimes.push(key);
                    regimes.len() - 1
                }
            };
            let e = sums.entry((ri, r.method)).or_insert((0.0, 0));
            e.0 += r.acc;
            e.1 += 1;
        }
        let aggregate = sums
            .into_iter()
            .map(|((ri, method), (sum, n))| AggregateRow {
                method,
                regime_mode: regimes[ri].0.clone(),
                regime_value: regimes[ri].1,
                mean_acc: sum / n as f64,
                runs: n,
            })
            .collect();
        Ok(EvalReport { meta, rows, aggregate })
    }

    pub fn mean(&self, method: Method, regime: MissingSpec) -> Option<f64> {
        self.aggregate
            .iter()
            .find(|a| a.method == method && a.regime_mode == regime.mode_name() && a.regime_value == regime.value())
            .map(|a| a.mean_acc)
    }
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn csv_bytes<S: Serialize>(rows: impl IntoIterator<Item = S>) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).expect("in-memory CSV write");
    }
    w.into_inner().expect("in-memory CSV flush")
}

#[derive(Serialize)]
struct AggregateFile<'a> {
    meta: &'a ReportMeta,
    aggregate: &'a [AggregateRow],
}

/// Writes per-run CSV, aggregate JSON, fixed-k plot data and the full report.
pub fn emit_report(report: &EvalReport, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let paths: Vec<PathBuf> = REPORT_FILES.iter().map(|f| dir.join(f)).collect();

    write(&paths[0], &csv_bytes(&report.rows))?;

    let agg = AggregateFile {
        meta: &report.meta,
        aggregate: &report.aggregate,
    };
    let json = serde_json::to_vec_pretty(&agg).map_err(|e| Error::json(&paths[1], e))?;
    write(&paths[1], &json)?;

    // x = missing channels, one column of mean accuracy per method
    let mut points: BTreeMap<usize, BTreeMap<Method, f64>> = BTreeMap::new();
    for a in report.aggregate.iter().filter(|a| a.regime_mode == "fixed") {
        points.entry(a.regime_value).or_default().insert(a.method, a.mean_acc);
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["missing".to_string()];
    header.extend(Method::ALL.iter().map(|m| m.to_string()));
    w.write_record(&header).expect("in-memory CSV write");
    for (k, row) in &points {
        let mut rec = vec![k.to_string()];
        rec.extend(Method::ALL.iter().map(|m| row.get(m).map(|v| v.to_string()).unwrap_or_default()));
        w.write_record(&rec).expect("in-memory CSV write");
    }
    write(&paths[2], &w.into_inner().expect("in-memory CSV flush"))?;

    let json = serde_json::to_vec_pretty(report).map_err(|e| Error::json(&paths[3], e))?;
    write(&paths[3], &json)?;
    Ok(paths)
}

/// Reads a `report.json` written by [`emit_report`].
pub fn load_report(path: &Path) -> Result<EvalReport> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::json(path, e))
}
