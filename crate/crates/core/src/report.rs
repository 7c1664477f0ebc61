//! Run reports on disk and cross-run comparison.
//!
//! A report directory holds:
//!
//! * `report.json`: the full [`RunRecord`].
//! * `metrics.csv`: `k,metric,value`, one row per test (K, metric).
//! * `epochs.csv`: `epoch,train_loss,validation_ndcg,seconds`, one row per
//!   trained epoch, validation NDCG at the selection K.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{per, MetricReport};
use crate::runner::RunRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub k: usize,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_ndcg: f64,
    pub seconds: f64,
}

pub fn metric_rows(report: &MetricReport) -> Vec<MetricRow> {
    report
        .metrics
        .iter()
        .flat_map(|m| {
            [
                ("hit_ratio", m.hit_ratio),
                ("recall", m.recall),
                ("ndcg", m.ndcg),
            ]
            .map(|(metric, value)| MetricRow {
                k: m.k,
                metric: metric.to_string(),
                value,
            })
        })
        .collect()
}

pub fn epoch_rows(record: &RunRecord) -> Vec<EpochRow> {
    let k = record.config.selection_k();
    record
        .epochs
        .iter()
        .filter_map(|e| {
            e.train_loss.map(|l| EpochRow {
                epoch: e.epoch,
                train_loss: l.total,
                validation_ndcg: e.validation.ndcg(k),
                seconds: e.seconds,
            })
        })
        .collect()
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes the record in `format` under `dir` and returns the files written.
pub fn emit_report(record: &RunRecord, format: ReportFormat, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    match format {
        ReportFormat::Json => {
            let path = dir.join("report.json");
            let text = serde_json::to_string_pretty(record)?;
            std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
            Ok(vec![path])
        }
        ReportFormat::Csv => {
            let metrics = dir.join("metrics.csv");
            write_csv(
                &metrics,
                &metric_rows(&record.test),
                &["k", "metric", "value"],
            )?;
            let epochs = dir.join("epochs.csv");
            write_csv(
                &epochs,
                &epoch_rows(record),
                &["epoch", "train_loss", "validation_ndcg", "seconds"],
            )?;
            Ok(vec![metrics, epochs])
        }
    }
}

pub fn read_report_json(path: &Path) -> Result<RunRecord> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    csv::Reader::from_path(path)?
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricRow>> {
    read_csv(path)
}

pub fn read_epochs_csv(path: &Path) -> Result<Vec<EpochRow>> {
    read_csv(path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricDelta {
    pub left: String,
    pub right: String,
    pub k: usize,
    pub metric: String,
    /// `right − left`.
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub tags: Vec<String>,
    pub k: usize,
    /// `per[i][j]` is the share of run i's hits that run j missed.
    pub per: Vec<Vec<f64>>,
    pub deltas: Vec<MetricDelta>,
}

/// Pairwise PER at the records' shared hit-set K, plus metric differences.
/// All records must come from the same dataset and seed, so that their test
/// splits coincide.
pub fn compare_runs(records: &[RunRecord]) -> Result<Comparison> {
    let first = records
        .first()
        .ok_or_else(|| Error::Empty("run records".into()))?;
    for r in records {
        if r.config.dataset != first.config.dataset || r.seed != first.seed {
            return Err(Error::InvalidArgument(
                "records were evaluated on different test splits".into(),
            ));
        }
        if r.test_hits.k != first.test_hits.k {
            return Err(Error::InvalidArgument(
                "records hold hit sets at different K".into(),
            ));
        }
    }
    let raw: Vec<&str> = records.iter().map(|r| r.test_hits.tag.as_str()).collect();
    let tags: Vec<String> = raw
        .iter()
        .enumerate()
        .map(|(i, t)| {
            if raw.iter().filter(|u| *u == t).count() > 1 {
                format!("{t}#{i}")
            } else {
                t.to_string()
            }
        })
        .collect();
    let per_matrix = records
        .iter()
        .map(|x| {
            records
                .iter()
                .map(|y| per(&x.test_hits, &y.test_hits))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let mut deltas = Vec::new();
    for (i, a) in records.iter().enumerate() {
        for (j, b) in records.iter().enumerate().skip(i + 1) {
            for (ra, rb) in metric_rows(&a.test).into_iter().zip(metric_rows(&b.test)) {
                deltas.push(MetricDelta {
                    left: tags[i].clone(),
                    right: tags[j].clone(),
                    k: ra.k,
                    metric: ra.metric,
                    delta: rb.value - ra.value,
                });
            }
        }
    }
    Ok(Comparison {
        tags,
        k: first.test_hits.k,
        per: per_matrix,
        deltas,
    })
}

#[derive(Serialize)]
struct PerRow<'a> {
    x: &'a str,
    y: &'a str,
    per: f64,
}

/// Writes `comparison.json`, `per.csv` (`x,y,per`) and `deltas.csv`.
pub fn emit_comparison(c: &Comparison, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json = dir.join("comparison.json");
    std::fs::write(&json, serde_json::to_string_pretty(c)? + "\n")
        .map_err(|e| Error::io(&json, e))?;
    let per_path = dir.join("per.csv");
    let rows: Vec<PerRow> = c
        .tags
        .iter()
        .enumerate()
        .flat_map(|(i, x)| {
            c.tags.iter().enumerate().map(move |(j, y)| PerRow {
                x,
                y,
                per: c.per[i][j],
            })
        })
        .collect();
    write_csv(&per_path, &rows, &["x", "y", "per"])?;
    let deltas = dir.join("deltas.csv");
    write_csv(
        &deltas,
        &c.deltas,
        &["left", "right", "k", "metric", "delta"],
    )?;
    Ok(vec![json, per_path, deltas])
}
