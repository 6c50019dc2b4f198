//! Export of per-epoch curves from metrics streams to one aligned CSV.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::train::{MetricRecord, RecordKind, METRICS_FILE};

/// Header of the exported table, in column order.
pub const CURVE_COLUMNS: [&str; 4] = ["epoch", "arm", "seed", "metric"];

/// Where one run's metrics stream lives.
#[derive(Clone, Debug, PartialEq)]
pub struct CurveSource {
    pub arm: String,
    pub seed: u64,
    pub path: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub epoch: usize,
    pub arm: String,
    pub seed: u64,
    pub metric: f64,
}

/// Epoch rows of one stream. The metric is the evaluation score (Top-1 or
/// mIoU) when the run had an evaluation split, otherwise the epoch's mean
/// training loss.
pub fn read_curve(source: &CurveSource) -> Result<Vec<CurveRow>> {
    let text = fs::read_to_string(&source.path).map_err(|e| Error::io(&source.path, e))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: MetricRecord = serde_json::from_str(line)
            .map_err(|e| Error::format(&source.path, format!("line {}: {e}", i + 1)))?;
        if record.kind != RecordKind::Epoch {
            continue;
        }
        rows.push(CurveRow {
            epoch: record.epoch,
            arm: source.arm.clone(),
            seed: source.seed,
            metric: record.top1.or(record.miou).unwrap_or(record.loss),
        });
    }
    Ok(rows)
}

/// Every `arms/<arm>/seed-<s>/metrics.jsonl` below a comparison directory,
/// sorted by arm then seed.
pub fn comparison_sources(dir: &Path) -> Result<Vec<CurveSource>> {
    let arms_dir = dir.join("arms");
    let list = |d: &Path| -> Result<Vec<PathBuf>> {
        let mut v: Vec<PathBuf> = fs::read_dir(d)
            .map_err(|e| Error::io(d, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        v.sort();
        Ok(v)
    };
    let mut out = Vec::new();
    for arm in list(&arms_dir)? {
        let name = arm.file_name().unwrap_or_default().to_string_lossy().into_owned();
        for run in list(&arm)? {
            let run_name = run.file_name().unwrap_or_default().to_string_lossy().into_owned();
            let Some(seed) = run_name.strip_prefix("seed-").and_then(|s| s.parse().ok()) else {
                continue;
            };
            let path = run.join(METRICS_FILE);
            if path.exists() {
                out.push(CurveSource {
                    arm: name.clone(),
                    seed,
                    path,
                });
            }
        }
    }
    out.sort_by(|a, b| (&a.arm, a.seed).cmp(&(&b.arm, b.seed)));
    Ok(out)
}

/// Writes `(epoch, arm, seed, metric)` rows of every source to `out`.
pub fn export_curves(sources: &[CurveSource], out: &Path) -> Result<Vec<CurveRow>> {
    let mut rows = Vec::new();
    for s in sources {
        rows.extend(read_curve(s)?);
    }
    let mut w = csv::Writer::from_path(out).map_err(|e| csv_error(out, e))?;
    for row in &rows {
        w.serialize(row).map_err(|e| csv_error(out, e))?;
    }
    w.flush().map_err(|e| Error::io(out, e))?;
    Ok(rows)
}

/// Parses a table written by [`export_curves`].
pub fn read_curves_csv(path: &Path) -> Result<Vec<CurveRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let header = r.headers().map_err(|e| csv_error(path, e))?;
    if header.iter().ne(CURVE_COLUMNS) {
        return Err(Error::format(path, format!("unexpected columns {header:?}")));
    }
    r.deserialize().map(|row| row.map_err(|e| csv_error(path, e))).collect()
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map(|p| format!("line {}: ", p.line())).unwrap_or_default();
    Error::format(path, format!("{line}{e}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::write_metrics;

    fn epoch(e: usize, loss: f64, top1: Option<f64>) -> MetricRecord {
        MetricRecord {
            kind: RecordKind::Epoch,
            epoch: e,
            stage: "ft".into(),
            loss,
            top1,
            ..Default::default()
        }
    }

    #[test]
    fn export_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.jsonl");
        let b = dir.path().join("b.jsonl");
        let step = MetricRecord {
            kind: RecordKind::Step,
            ..Default::default()
        };
        write_metrics(&a, &[step.clone(), epoch(0, 1.0, Some(0.25)), step, epoch(1, 0.5, Some(0.5))]).unwrap();
        write_metrics(&b, &[epoch(0, 0.7, None)]).unwrap();
        let sources = vec![
            CurveSource { arm: "cspt".into(), seed: 3, path: a },
            CurveSource { arm: "scratch".into(), seed: 1, path: b },
        ];
        let out = dir.path().join("curves.csv");
        let rows = export_curves(&sources, &out).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[2].metric, 0.7);
        let text = fs::read_to_string(&out).unwrap();
        assert_eq!(text.lines().next(), Some("epoch,arm,seed,metric"));
        assert_eq!(read_curves_csv(&out).unwrap(), rows);
    }

    #[test]
    fn malformed_line_is_reported_with_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        write_metrics(&path, &[epoch(0, 1.0, None)]).unwrap();
        let mut text = fs::read_to_string(&path).unwrap();
        text.push_str("{not json\n");
        fs::write(&path, text).unwrap();
        let src = CurveSource { arm: "x".into(), seed: 0, path };
        let err = export_curves(&[src], &dir.path().join("c.csv")).unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
    }

    #[test]
    fn discovers_comparison_layout() {
        let dir = tempfile::tempdir().unwrap();
        for (arm, seed) in [("b", 1), ("a", 10), ("a", 2)] {
            let run = dir.path().join("arms").join(arm).join(format!("seed-{seed}"));
            fs::create_dir_all(&run).unwrap();
            write_metrics(&run.join(METRICS_FILE), &[epoch(0, 1.0, None)]).unwrap();
        }
        let found: Vec<_> = comparison_sources(dir.path())
            .unwrap()
            .into_iter()
            .map(|s| (s.arm, s.seed))
            .collect();
        assert_eq!(found, vec![("a".into(), 2), ("a".into(), 10), ("b".into(), 1)]);
    }
}
