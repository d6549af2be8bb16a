//! Byte-exact communication accounting.
//!
//! Costs are integer byte counts at 4 bytes per parameter. Rendering uses
//! binary scaling (1 MB = 2^20 B) with MB/GB labels. `published_count` and the
//! `*_published` renderers reproduce the rounded-count conventions of published cost tables.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BYTES_PER_PARAM: u64 = 4;

const KIB: u64 = 1 << 10;
const MIB: u64 = 1 << 20;
const GIB: u64 = 1 << 30;

/// Single-direction bytes for `param_count` parameters sent to or from `clients` clients.
pub fn round_cost(param_count: u64, clients: u64) -> u64 {
    BYTES_PER_PARAM * param_count * clients
}

fn unit_of(bytes: u64) -> (u64, &'static str) {
    match bytes {
        b if b >= GIB => (GIB, "GB"),
        b if b >= MIB => (MIB, "MB"),
        b if b >= KIB => (KIB, "KB"),
        _ => (1, "B"),
    }
}

/// Value in hundredths of `unit`, rounded half up, in exact integer arithmetic.
fn hundredths(bytes: u64, unit: u64) -> u64 {
    let num = bytes as u128 * 100;
    ((num + unit as u128 / 2) / unit as u128) as u64
}

fn fixed2(h: u64) -> String {
    format!("{}.{:02}", h / 100, h % 100)
}

fn trimmed(h: u64) -> String {
    let s = fixed2(h);
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

/// Binary-scaled rendering with two decimals, e.g. `5,440,000 → "5.19MB"`.
pub fn format_cost(bytes: u64) -> String {
    let (unit, label) = unit_of(bytes);
    if unit == 1 {
        return format!("{bytes}B");
    }
    format!("{}{label}", fixed2(hundredths(bytes, unit)))
}

/// Parameter count rounded to 0.01 million, as printed in cost tables.
pub fn published_count(count: u64) -> u64 {
    (count + 5_000) / 10_000 * 10_000
}

/// `"85.88M"`-style rendering of a parameter count.
pub fn format_millions(count: u64) -> String {
    fixed2((count + 5_000) / 10_000) + "M"
}

/// Table-style rendering: whole megabytes from 100 MB up to 1 GB, otherwise
/// two decimals with trailing zeros dropped.
pub fn format_cost_published(bytes: u64) -> String {
    let (unit, label) = unit_of(bytes);
    if unit == MIB && bytes >= 100 * MIB {
        return format!("{}MB", (bytes + MIB / 2) / MIB);
    }
    if unit == 1 {
        return format!("{bytes}B");
    }
    format!("{}{label}", trimmed(hundredths(bytes, unit)))
}

/// Table-style cumulative cost: the rendered per-round figure (two
/// decimals, in its own unit) multiplied by the number of rounds.
pub fn format_cumulative_published(per_round_bytes: u64, rounds: u64) -> String {
    let (unit, label) = unit_of(per_round_bytes);
    if unit == 1 {
        return format!("{}B", per_round_bytes * rounds);
    }
    format!("{}{label}", trimmed(hundredths(per_round_bytes, unit) * rounds))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub round: usize,
    pub mode: String,
    pub param_count: u64,
    pub clients: u64,
    pub upload_bytes: u64,
    pub download_bytes: u64,
    /// Running single-direction (upload) total through this round.
    pub cumulative_bytes: u64,
    pub server_accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CommLedger {
    entries: Vec<LedgerEntry>,
    total_upload: u64,
    total_download: u64,
}

impl CommLedger {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends the round in which `clients` clients exchanged `param_count`
    /// parameters in each direction.
    pub fn record(&mut self, round: usize, mode: &str, param_count: u64, clients: u64, server_accuracy: f64) -> &LedgerEntry {
        let bytes = round_cost(param_count, clients);
        self.total_upload += bytes;
        self.total_download += bytes;
        self.entries.push(LedgerEntry {
            round,
            mode: mode.to_string(),
            param_count,
            clients,
            upload_bytes: bytes,
            download_bytes: bytes,
            cumulative_bytes: self.total_upload,
            server_accuracy,
        });
        self.entries.last().expect("just pushed")
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    pub fn total_upload(&self) -> u64 {
        self.total_upload
    }

    pub fn total_download(&self) -> u64 {
        self.total_download
    }

    pub fn cost_to_target(&self, target_accuracy: f64) -> Option<u64> {
        cost_to_target(&self.entries, target_accuracy)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for e in &self.entries {
            w.serialize(e).map_err(|e| Error::Io(std::io::Error::other(e)))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        if self.entries.is_empty() {
            buf = b"round,mode,param_count,clients,upload_bytes,download_bytes,cumulative_bytes,server_accuracy\n".to_vec();
        }
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        let source = path.display().to_string();
        let mut r = csv::Reader::from_path(path).map_err(|e| Error::Parse {
            source_name: source.clone(),
            location: "line 1".into(),
            message: e.to_string(),
        })?;
        let mut ledger = CommLedger::new();
        for rec in r.deserialize::<LedgerEntry>() {
            let e = rec.map_err(|e| Error::Parse {
                source_name: source.clone(),
                location: format!("line {}", e.position().map_or(0, |p| p.line())),
                message: e.to_string(),
            })?;
            ledger.total_upload += e.upload_bytes;
            ledger.total_download += e.download_bytes;
            ledger.entries.push(e);
        }
        Ok(ledger)
    }
}

/// Cumulative upload bytes through the first round whose server accuracy
/// reaches `target_accuracy`; `None` if no round does.
pub fn cost_to_target(entries: &[LedgerEntry], target_accuracy: f64) -> Option<u64> {
    let mut total = 0u64;
    for e in entries {
        total += e.upload_bytes;
        if e.server_accuracy >= target_accuracy {
            return Some(total);
        }
    }
    None
}
