//! Analytic reproduction of the published ViT-B parameter and cost table.

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::Result;
use crate::ledger::{format_cost_published, format_millions, published_count, round_cost};
use crate::model::{count_params, ModelSpec};
use crate::peft::TuningMode;

/// Clients per round in the table.
pub const TABLE1_CLIENTS: u64 = 8;

/// `(mode, tuned count, cost)` exactly as printed.
pub const TABLE1_EXPECTED: [(&str, &str, &str); 5] = [
    ("full", "85.88M", "2.56GB"),
    ("head", "0.08M", "2.44MB"),
    ("bias", "0.18M", "5.49MB"),
    ("adapter", "0.23M", "7.02MB"),
    ("prompt", "0.17M", "5.19MB"),
];

/// Single-client full-model round cost as quoted in the overview figure.
pub const FIGURE1_EXPECTED: &str = "328MB";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Table1Row {
    pub mode: String,
    pub exact_tuned: u64,
    pub tuned: String,
    pub cost: String,
    pub expected_tuned: String,
    pub expected_cost: String,
}

impl Table1Row {
    pub fn matches(&self) -> bool {
        self.tuned == self.expected_tuned && self.cost == self.expected_cost
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Table1Report {
    pub rows: Vec<Table1Row>,
    pub single_client_bytes: u64,
    pub single_client_cost: String,
}

impl Table1Report {
    /// Human-readable description of every cell that differs.
    pub fn mismatches(&self) -> Vec<String> {
        let mut out = Vec::new();
        for r in &self.rows {
            if r.tuned != r.expected_tuned {
                out.push(format!("{}: tuned {} != {}", r.mode, r.tuned, r.expected_tuned));
            }
            if r.cost != r.expected_cost {
                out.push(format!("{}: cost {} != {}", r.mode, r.cost, r.expected_cost));
            }
        }
        if self.single_client_cost != FIGURE1_EXPECTED {
            out.push(format!(
                "single-client round: {} != {FIGURE1_EXPECTED}",
                self.single_client_cost
            ));
        }
        out
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<8} {:>12} {:>14} {:>9}  status", "mode", "exact", "tuned x M", "cost");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<8} {:>12} {:>14} {:>9}  {}",
                r.mode,
                r.exact_tuned,
                format!("{} x {TABLE1_CLIENTS}", r.tuned),
                r.cost,
                if r.matches() { "ok" } else { "MISMATCH" }
            );
        }
        let _ = writeln!(
            s,
            "single client, full model: {} B per round = {}",
            self.single_client_bytes, self.single_client_cost
        );
        s
    }
}

/// Counts and costs for the five modes on ViT-B with 100 classes.
pub fn table1_report() -> Result<Table1Report> {
    let spec = ModelSpec::vit_b(100);
    let mut rows = Vec::new();
    for (mode, (name, tuned, cost)) in TuningMode::table1_modes().iter().zip(TABLE1_EXPECTED) {
        let counts = count_params(&spec, mode)?;
        debug_assert_eq!(mode.name(), name);
        rows.push(Table1Row {
            mode: mode.name().to_string(),
            exact_tuned: counts.tuned,
            tuned: format_millions(counts.tuned),
            cost: format_cost_published(round_cost(published_count(counts.transmitted), TABLE1_CLIENTS)),
            expected_tuned: tuned.to_string(),
            expected_cost: cost.to_string(),
        });
    }
    let full = count_params(&spec, &TuningMode::Full)?;
    let single_client_bytes = round_cost(published_count(full.transmitted), 1);
    Ok(Table1Report {
        rows,
        single_client_bytes,
        single_client_cost: format_cost_published(single_client_bytes),
    })
}
