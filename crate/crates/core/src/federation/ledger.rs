//! Append-only record of transmitted parameters and the transmission-time model.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BYTES_PER_PARAM: u64 = 4;
pub const BYTES_PER_MB: f64 = 1e6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Upload,
    Broadcast,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transfer {
    pub stage: String,
    pub round: usize,
    /// `None` for the server.
    pub client: Option<usize>,
    pub direction: Direction,
    pub params: u64,
}

impl Transfer {
    pub fn bytes(&self) -> u64 {
        self.params * BYTES_PER_PARAM
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PayloadLedger {
    entries: Vec<Transfer>,
}

impl PayloadLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_entries(entries: Vec<Transfer>) -> Self {
        PayloadLedger { entries }
    }

    pub fn record(&mut self, transfer: Transfer) {
        self.entries.push(transfer);
    }

    pub fn entries(&self) -> &[Transfer] {
        &self.entries
    }

    pub fn total_bytes(&self) -> u64 {
        self.entries.iter().map(Transfer::bytes).sum()
    }

    pub fn bytes_where(&self, keep: impl Fn(&Transfer) -> bool) -> u64 {
        self.entries.iter().filter(|t| keep(t)).map(Transfer::bytes).sum()
    }

    /// Total bytes per `(stage, round)`, in first-seen order.
    pub fn bytes_per_round(&self) -> Vec<((String, usize), u64)> {
        let mut out: Vec<((String, usize), u64)> = Vec::new();
        for t in &self.entries {
            match out.last_mut() {
                Some(((s, r), b)) if *s == t.stage && *r == t.round => *b += t.bytes(),
                _ => out.push(((t.stage.clone(), t.round), t.bytes())),
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CommTime {
    pub bandwidth: f64,
    pub per_round: Vec<((String, usize), f64)>,
    pub total: f64,
}

/// Seconds needed to move every ledger entry at `bandwidth` bytes per second.
pub fn comm_time(ledger: &PayloadLedger, bandwidth: f64) -> Result<CommTime> {
    if !(bandwidth > 0.0 && bandwidth.is_finite()) {
        return Err(Error::Input(format!("bandwidth must be positive, got {bandwidth}")));
    }
    let per_round: Vec<_> = ledger.bytes_per_round().into_iter().map(|(k, b)| (k, b as f64 / bandwidth)).collect();
    Ok(CommTime { bandwidth, per_round, total: ledger.total_bytes() as f64 / bandwidth })
}
