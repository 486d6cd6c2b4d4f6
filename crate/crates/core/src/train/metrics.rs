//! The line-delimited metrics stream: one JSON object per line, tagged by
//! `record` (`step`, `routing` or `eval`).

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moe::RoutingRecord;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub l_main: f64,
    /// One per routing group.
    pub l_balance: Vec<f64>,
    pub total: f64,
    pub lr: f64,
    pub drop_rate: f64,
    /// Training-batch accuracy.
    pub accuracy: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub accuracy: f64,
    pub loss: f64,
    pub drop_rates: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "kebab-case")]
pub enum MetricsRecord {
    Step(StepRecord),
    Routing(RoutingRecord),
    Eval(EvalRecord),
}

impl MetricsRecord {
    pub fn to_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

/// Receives records in step order.
pub trait MetricsSink {
    fn write(&mut self, record: &MetricsRecord) -> Result<()>;
}

impl MetricsSink for Vec<MetricsRecord> {
    fn write(&mut self, record: &MetricsRecord) -> Result<()> {
        self.push(record.clone());
        Ok(())
    }
}

/// Discards everything.
pub struct NullSink;

impl MetricsSink for NullSink {
    fn write(&mut self, _: &MetricsRecord) -> Result<()> {
        Ok(())
    }
}

/// Appends JSON lines to a file.
pub struct JsonlWriter {
    out: BufWriter<fs::File>,
}

impl JsonlWriter {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(Self {
            out: BufWriter::new(fs::File::create(path)?),
        })
    }

    pub fn append(path: &Path) -> Result<Self> {
        let f = fs::OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self { out: BufWriter::new(f) })
    }

    pub fn flush(&mut self) -> Result<()> {
        Ok(self.out.flush()?)
    }
}

impl MetricsSink for JsonlWriter {
    fn write(&mut self, record: &MetricsRecord) -> Result<()> {
        writeln!(self.out, "{}", record.to_line()?)?;
        Ok(())
    }
}

impl Drop for JsonlWriter {
    fn drop(&mut self) {
        let _ = self.out.flush();
    }
}

/// Parses a metrics stream. Blank lines are skipped; a malformed line is an
/// error naming its 1-based line number.
pub fn parse_metrics(text: &str) -> Result<Vec<MetricsRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(line).map_err(|e| Error::Format {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let f = fs::File::open(path)?;
    let mut text = String::new();
    for line in BufReader::new(f).lines() {
        text.push_str(&line?);
        text.push('\n');
    }
    parse_metrics(&text)
}
