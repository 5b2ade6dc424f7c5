//! Per-round metric records and their CSV form.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SERVER: &str = "server";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub stage: String,
    pub round: usize,
    pub client_id: String,
    pub train_loss: Option<f64>,
    pub val_accuracy: f64,
    pub active_lora_layers: Option<usize>,
    pub uploaded_bytes: u64,
    pub lambda_mean: Option<f64>,
}

impl MetricRow {
    pub fn is_server(&self) -> bool {
        self.client_id == SERVER
    }
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Input(format!("metrics csv: {other:?}")),
    }
}

/// Serializes rows, optionally with the header line.
pub fn to_csv(rows: &[MetricRow], header: bool) -> Result<String> {
    let mut w = csv::WriterBuilder::new().has_headers(header).from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    if header && rows.is_empty() {
        w.write_record(HEADER).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

pub const HEADER: [&str; 8] =
    ["stage", "round", "client_id", "train_loss", "val_accuracy", "active_lora_layers", "uploaded_bytes", "lambda_mean"];

pub fn from_csv(text: &str) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

/// Appends rows to a file, flushing after every batch so partial runs keep their data.
pub struct MetricsSink {
    file: std::fs::File,
}

impl MetricsSink {
    /// Creates (truncating) `path` and writes the header plus `existing` rows.
    pub fn create(path: &std::path::Path, existing: &[MetricRow]) -> Result<Self> {
        let mut file = std::fs::File::create(path)?;
        file.write_all(to_csv(existing, true)?.as_bytes())?;
        file.flush()?;
        Ok(MetricsSink { file })
    }

    pub fn append(&mut self, rows: &[MetricRow]) -> Result<()> {
        self.file.write_all(to_csv(rows, false)?.as_bytes())?;
        self.file.flush()?;
        Ok(())
    }
}
