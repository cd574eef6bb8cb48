//! `metrics.csv` layout.
//!
//! Fixed columns `epoch,train_loss,train_acc,test_acc,wall_seconds,val_acc,lr`
//! followed by `L{i}_norm_min,L{i}_norm_mean,L{i}_norm_max,L{i}_update_mean`
//! for every weighted layer `i`. Floats use Rust's shortest round-trip
//! formatting; absent values are empty fields. With `wall_clock` off the
//! `wall_seconds` column stays empty so that reruns produce identical bytes.

use std::io::Write;

use super::MetricsRecord;
use crate::error::{Error, Result};

pub const FIXED_COLUMNS: [&str; 7] = [
    "epoch",
    "train_loss",
    "train_acc",
    "test_acc",
    "wall_seconds",
    "val_acc",
    "lr",
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MetricsLayout {
    pub layers: Vec<usize>,
    pub wall_clock: bool,
}

impl MetricsLayout {
    pub fn header(&self) -> Vec<String> {
        let mut h: Vec<String> = FIXED_COLUMNS.iter().map(|s| s.to_string()).collect();
        for l in &self.layers {
            for stat in ["norm_min", "norm_mean", "norm_max", "update_mean"] {
                h.push(format!("L{l}_{stat}"));
            }
        }
        h
    }

    pub fn row(&self, r: &MetricsRecord) -> Result<Vec<String>> {
        let layers: Vec<usize> = r.layers.iter().map(|s| s.layer).collect();
        if layers != self.layers {
            return Err(Error::State(format!(
                "record covers layers {layers:?}, table expects {:?}",
                self.layers
            )));
        }
        let mut row = vec![
            r.epoch.to_string(),
            r.train_loss.to_string(),
            r.train_acc.to_string(),
            r.test_acc.to_string(),
            if self.wall_clock { r.wall_seconds.to_string() } else { String::new() },
            r.val_acc.map(|v| v.to_string()).unwrap_or_default(),
            r.lr.to_string(),
        ];
        for s in &r.layers {
            row.extend([s.norm_min, s.norm_mean, s.norm_max, s.update_mean].map(|v| v.to_string()));
        }
        Ok(row)
    }
}

/// Streams records to a CSV sink, flushing after each row.
pub struct MetricsWriter<W: Write> {
    csv: csv::Writer<W>,
    layout: MetricsLayout,
}

fn csv_err(e: csv::Error) -> Error {
    Error::State(format!("writing metrics: {e}"))
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(sink: W, layout: MetricsLayout) -> Result<Self> {
        let mut csv = csv::WriterBuilder::new().terminator(csv::Terminator::CRLF).from_writer(sink);
        csv.write_record(layout.header()).map_err(csv_err)?;
        csv.flush().map_err(|e| Error::State(format!("writing metrics: {e}")))?;
        Ok(Self { csv, layout })
    }

    /// Continue a table whose header is already in `sink`.
    pub fn append(sink: W, layout: MetricsLayout) -> Self {
        let csv = csv::WriterBuilder::new().terminator(csv::Terminator::CRLF).from_writer(sink);
        Self { csv, layout }
    }

    pub fn write(&mut self, record: &MetricsRecord) -> Result<()> {
        self.csv.write_record(self.layout.row(record)?).map_err(csv_err)?;
        self.csv.flush().map_err(|e| Error::State(format!("writing metrics: {e}")))
    }

    pub fn into_inner(self) -> Result<W> {
        self.csv.into_inner().map_err(|e| Error::State(format!("writing metrics: {e}")))
    }
}

/// The whole table as bytes.
pub fn to_csv(records: &[MetricsRecord], layout: &MetricsLayout) -> Result<Vec<u8>> {
    let mut w = MetricsWriter::new(Vec::new(), layout.clone())?;
    for r in records {
        w.write(r)?;
    }
    w.into_inner()
}
