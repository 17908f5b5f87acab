//! Metrics stream: fixed-header CSV rows, flushed per eval point.
//!
//! Header: `step,phase,split,loss,accuracy,fidelity,wall_ms`. Optional
//! fields serialize as empty strings. The wall_ms column is pinned to 0 so
//! artifacts stay byte-identical across re-runs; timing goes to stderr.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{CkbError, Result};

pub const CSV_HEADER: &str = "step,phase,split,loss,accuracy,fidelity,wall_ms";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Baseline,
    Import,
    Export,
    Eval,
}

impl Phase {
    pub fn as_str(&self) -> &'static str {
        match self {
            Phase::Baseline => "baseline",
            Phase::Import => "import",
            Phase::Export => "export",
            Phase::Eval => "eval",
        }
    }

    pub fn parse(s: &str) -> Result<Phase> {
        match s {
            "baseline" => Ok(Phase::Baseline),
            "import" => Ok(Phase::Import),
            "export" => Ok(Phase::Export),
            "eval" => Ok(Phase::Eval),
            other => Err(CkbError::Input(format!("unknown phase '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricSplit {
    Train,
    Valid,
    Test,
    Heldout,
}

impl MetricSplit {
    pub fn as_str(&self) -> &'static str {
        match self {
            MetricSplit::Train => "train",
            MetricSplit::Valid => "valid",
            MetricSplit::Test => "test",
            MetricSplit::Heldout => "heldout",
        }
    }

    pub fn parse(s: &str) -> Result<MetricSplit> {
        match s {
            "train" => Ok(MetricSplit::Train),
            "valid" => Ok(MetricSplit::Valid),
            "test" => Ok(MetricSplit::Test),
            "heldout" => Ok(MetricSplit::Heldout),
            other => Err(CkbError::Input(format!("unknown split '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub phase: Phase,
    pub split: MetricSplit,
    pub loss: f64,
    pub accuracy: Option<f64>,
    pub fidelity: Option<f64>,
    pub wall_ms: u64,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        let _ = write!(
            s,
            "{},{},{},{:.6},{},{},{}",
            self.step,
            self.phase.as_str(),
            self.split.as_str(),
            self.loss,
            fmt_opt(self.accuracy),
            fmt_opt(self.fidelity),
            self.wall_ms
        );
        s
    }

    pub fn parse_csv(line: &str) -> Result<MetricsRow> {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(CkbError::Input(format!(
                "expected 7 CSV fields, got {}",
                fields.len()
            )));
        }
        let opt = |s: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse::<f64>()
                    .map(Some)
                    .map_err(|_| CkbError::Input(format!("bad number '{s}'")))
            }
        };
        Ok(MetricsRow {
            step: fields[0]
                .parse()
                .map_err(|_| CkbError::Input(format!("bad step '{}'", fields[0])))?,
            phase: Phase::parse(fields[1])?,
            split: MetricSplit::parse(fields[2])?,
            loss: fields[3]
                .parse()
                .map_err(|_| CkbError::Input(format!("bad loss '{}'", fields[3])))?,
            accuracy: opt(fields[4])?,
            fidelity: opt(fields[5])?,
            wall_ms: fields[6]
                .parse()
                .map_err(|_| CkbError::Input(format!("bad wall_ms '{}'", fields[6])))?,
        })
    }
}

/// Append-safe CSV writer; writes the header on creation and flushes after
/// every row.
pub struct MetricsWriter {
    out: BufWriter<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<MetricsWriter> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)
                    .map_err(|e| CkbError::Io(format!("{}: {e}", parent.display())))?;
            }
        }
        let file =
            File::create(path).map_err(|e| CkbError::Io(format!("{}: {e}", path.display())))?;
        let mut out = BufWriter::new(file);
        writeln!(out, "{CSV_HEADER}").map_err(CkbError::from)?;
        out.flush().map_err(CkbError::from)?;
        Ok(MetricsWriter { out })
    }

    pub fn write(&mut self, row: &MetricsRow) -> Result<()> {
        writeln!(self.out, "{}", row.to_csv()).map_err(CkbError::from)?;
        self.out.flush().map_err(CkbError::from)
    }
}

/// Read back a metrics CSV, validating the header.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let content = std::fs::read_to_string(path)
        .map_err(|e| CkbError::Io(format!("{}: {e}", path.display())))?;
    let mut lines = content.lines();
    match lines.next() {
        Some(h) if h == CSV_HEADER => {}
        other => {
            return Err(CkbError::Input(format!(
                "bad metrics header: {:?}",
                other.unwrap_or("")
            )))
        }
    }
    lines.map(MetricsRow::parse_csv).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_round_trips_through_parser() {
        let row = MetricsRow {
            step: 42,
            phase: Phase::Import,
            split: MetricSplit::Heldout,
            loss: 0.125,
            accuracy: Some(0.875),
            fidelity: None,
            wall_ms: 0,
        };
        let parsed = MetricsRow::parse_csv(&row.to_csv()).unwrap();
        assert_eq!(parsed, row);
    }

    #[test]
    fn empty_optionals_serialize_as_empty_strings() {
        let row = MetricsRow {
            step: 1,
            phase: Phase::Baseline,
            split: MetricSplit::Train,
            loss: 1.0,
            accuracy: None,
            fidelity: None,
            wall_ms: 0,
        };
        assert_eq!(row.to_csv(), "1,baseline,train,1.000000,,,0");
    }

    #[test]
    fn many_rows_survive_write_and_read() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        let mut w = MetricsWriter::create(&path).unwrap();
        for i in 0..10_000u64 {
            w.write(&MetricsRow {
                step: i,
                phase: Phase::Eval,
                split: MetricSplit::Test,
                loss: i as f64 * 0.001,
                accuracy: Some(0.5),
                fidelity: Some(0.25),
                wall_ms: 0,
            })
            .unwrap();
        }
        drop(w);
        let rows = read_metrics(&path).unwrap();
        assert_eq!(rows.len(), 10_000);
        assert_eq!(rows[9999].step, 9999);
    }
}
