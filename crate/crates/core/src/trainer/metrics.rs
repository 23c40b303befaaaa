use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::write_atomic;

/// One evaluation event. Serialized as a single JSON line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsRecord {
    pub step: u64,
    /// Training seconds so far, evaluation excluded. `null` in strict mode
    /// so that logs are reproducible byte for byte.
    pub wall_time_s: Option<f64>,
    /// Mean loss of the steps since the previous record; at step 0, the
    /// loss of the first batch.
    pub train_loss: Option<f64>,
    /// `exp(-log_scale)`.
    pub temperature: f64,
    pub lr: f64,
    /// Zero-shot accuracy per set name.
    pub eval: BTreeMap<String, f64>,
    pub recall_at_1: Option<f64>,
    pub recall_at_5: Option<f64>,
    pub recall_at_10: Option<f64>,
}

impl MetricsRecord {
    pub fn to_line(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Format(format!("metrics record: {e}")))
    }
}

pub fn append_metrics(path: &Path, record: &MetricsRecord) -> Result<()> {
    let mut line = record.to_line()?;
    line.push('\n');
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    f.write_all(line.as_bytes())
        .and_then(|_| f.flush())
        .map_err(|e| Error::io(format!("appending to {}", path.display()), e))
}

pub fn parse_metrics(text: &str) -> Result<Vec<MetricsRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::Format(format!("metrics line {}: {e}", i + 1)))
        })
        .collect()
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    parse_metrics(&text)
}

/// Drops every record after `step`, keeping the surviving lines byte for
/// byte.
pub fn truncate_metrics(path: &Path, step: u64) -> Result<()> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(()),
        Err(e) => return Err(Error::io(format!("reading {}", path.display()), e)),
    };
    let mut kept = String::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let r: MetricsRecord = serde_json::from_str(line)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if r.step <= step {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    write_atomic(path, kept.as_bytes())
}

/// CSV with columns `step, wall_time_s, train_loss`, then every other
/// metric key in sorted order. Zero-shot accuracies appear as
/// `eval.<set>`. Missing values are empty cells.
pub fn metrics_to_csv(records: &[MetricsRecord]) -> String {
    let mut keys: BTreeSet<String> = ["temperature", "lr", "recall_at_1", "recall_at_5", "recall_at_10"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for r in records {
        keys.extend(r.eval.keys().map(|k| format!("eval.{k}")));
    }
    let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut out = String::from("step,wall_time_s,train_loss");
    for k in &keys {
        out.push(',');
        out.push_str(&csv_field(k));
    }
    out.push('\n');
    for r in records {
        out.push_str(&r.step.to_string());
        out.push(',');
        out.push_str(&cell(r.wall_time_s));
        out.push(',');
        out.push_str(&cell(r.train_loss));
        for k in &keys {
            let v = match k.as_str() {
                "temperature" => Some(r.temperature),
                "lr" => Some(r.lr),
                "recall_at_1" => r.recall_at_1,
                "recall_at_5" => r.recall_at_5,
                "recall_at_10" => r.recall_at_10,
                other => r.eval.get(&other["eval.".len()..]).copied(),
            };
            out.push(',');
            out.push_str(&cell(v));
        }
        out.push('\n');
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(step: u64, acc: Option<f64>) -> MetricsRecord {
        MetricsRecord {
            step,
            wall_time_s: None,
            train_loss: Some(1.5),
            temperature: 0.07,
            lr: 1e-3,
            eval: acc.map(|a| ("in,dist".to_string(), a)).into_iter().collect(),
            recall_at_1: Some(0.5),
            recall_at_5: None,
            recall_at_10: None,
        }
    }

    #[test]
    fn json_line_round_trip() {
        let r = record(3, Some(0.25));
        let line = r.to_line().unwrap();
        assert!(!line.contains('\n'));
        assert_eq!(parse_metrics(&line).unwrap(), vec![r]);
    }

    #[test]
    fn csv_layout() {
        let csv = metrics_to_csv(&[record(0, None), record(10, Some(0.75))]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(
            lines[0],
            "step,wall_time_s,train_loss,\"eval.in,dist\",lr,recall_at_1,recall_at_10,recall_at_5,temperature"
        );
        assert_eq!(lines[1], "0,,1.5,,0.001,0.5,,,0.07");
        assert_eq!(lines[2], "10,,1.5,0.75,0.001,0.5,,,0.07");
    }

    #[test]
    fn truncation_keeps_prefix() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        for s in [0, 5, 10, 15] {
            append_metrics(&p, &record(s, None)).unwrap();
        }
        let before = fs::read_to_string(&p).unwrap();
        truncate_metrics(&p, 10).unwrap();
        let after = fs::read_to_string(&p).unwrap();
        assert!(before.starts_with(&after));
        assert_eq!(read_metrics(&p).unwrap().len(), 3);
    }
}
