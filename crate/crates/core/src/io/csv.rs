//! Metrics CSV emission, one row per outer iteration.

use crate::control::MetricsRecord;
use crate::error::{Error, Result};
use std::io::Write;
use std::path::Path;

pub const METRICS_HEADER: &str = "iter,model_loss,actor_loss,sigma_metric,pearson,wall_ms";

fn format_row(r: &MetricsRecord) -> String {
    format!(
        "{},{},{},{},{},{}",
        r.iter, r.model_loss, r.actor_loss, r.sigma_metric, r.pearson, r.wall_ms
    )
}

/// Streaming writer: header on open, one `append` per iteration.
pub struct MetricsCsvWriter {
    file: std::fs::File,
    last_iter: Option<usize>,
}

impl MetricsCsvWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let mut file = std::fs::File::create(path)?;
        writeln!(file, "{METRICS_HEADER}")?;
        Ok(MetricsCsvWriter {
            file,
            last_iter: None,
        })
    }

    pub fn append(&mut self, record: &MetricsRecord) -> Result<()> {
        if let Some(last) = self.last_iter {
            if record.iter <= last {
                return Err(Error::Invalid(format!(
                    "metrics iter must be strictly increasing: {} after {last}",
                    record.iter
                )));
            }
        }
        writeln!(self.file, "{}", format_row(record))?;
        self.last_iter = Some(record.iter);
        Ok(())
    }
}

pub fn write_metrics_csv(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let mut w = MetricsCsvWriter::create(path)?;
    for r in records {
        w.append(r)?;
    }
    Ok(())
}

/// Generic numeric CSV (embedding dumps and baselines).
pub fn write_numeric_csv(path: &Path, header: &str, rows: &[Vec<f64>]) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    writeln!(file, "{header}")?;
    for row in rows {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(file, "{}", line.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(iter: usize) -> MetricsRecord {
        MetricsRecord {
            iter,
            model_loss: 1.5,
            actor_loss: 0.25,
            sigma_metric: 0.125,
            pearson: 0.5,
            wall_ms: 12,
        }
    }

    #[test]
    fn header_and_rows_match_contract() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        write_metrics_csv(&path, &[rec(0), rec(1)]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], METRICS_HEADER);
        assert_eq!(lines[1], "0,1.5,0.25,0.125,0.5,12");
        assert_eq!(lines.len(), 3);
    }

    #[test]
    fn non_increasing_iter_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let mut w = MetricsCsvWriter::create(&path).unwrap();
        w.append(&rec(3)).unwrap();
        assert!(w.append(&rec(3)).is_err());
        assert!(w.append(&rec(2)).is_err());
    }
}
