//! Per-session metrics rows and their CSV form.

use std::fs::{File, OpenOptions};
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};

/// One evaluation after a feedback session. Empty loss cells mean the term
/// did not run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub run_id: String,
    pub seed: u64,
    pub global_step: u64,
    pub feedback_used: u64,
    pub eval_true_return: f64,
    pub eval_success_rate: f64,
    pub reward_spearman: f64,
    pub loss_ce: Option<f64>,
    pub loss_t: Option<f64>,
    pub loss_a: Option<f64>,
}

/// Writes rows to `metrics.csv` as they are produced.
pub struct MetricsWriter {
    inner: csv::Writer<File>,
}

impl MetricsWriter {
    /// Starts a new file, replacing any existing one.
    pub fn create(path: &Path) -> io::Result<Self> {
        let inner = csv::Writer::from_writer(File::create(path)?);
        Ok(Self { inner })
    }

    /// Continues an existing file; the header is written only if it is empty.
    pub fn append(path: &Path) -> io::Result<Self> {
        let fresh = !path.exists() || std::fs::metadata(path)?.len() == 0;
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        let inner = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
        Ok(Self { inner })
    }

    pub fn write(&mut self, row: &MetricsRow) -> io::Result<()> {
        self.inner.serialize(row).map_err(io::Error::other)?;
        self.inner.flush()
    }
}

pub fn read_metrics(path: &Path) -> io::Result<Vec<MetricsRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(io::Error::other)?;
    reader
        .deserialize()
        .collect::<Result<Vec<MetricsRow>, _>>()
        .map_err(io::Error::other)
}
