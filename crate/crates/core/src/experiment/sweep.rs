use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::experiment::config::ExperimentConfig;
use crate::experiment::run::{run_experiment, RunArtifacts};

/// A table cell at one simulated-time budget.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Cell {
    Value(f64),
    /// No probe had happened yet at this budget.
    Missing,
    /// The run finished before this budget.
    NotAvailable,
}

impl std::fmt::Display for Cell {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Cell::Value(v) => write!(f, "{v:.4}"),
            Cell::Missing => f.write_str("-"),
            Cell::NotAvailable => f.write_str("N/A"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub policy: String,
    pub seed: u64,
    pub accuracy: Vec<Cell>,
    pub loss: Vec<Cell>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    pub budgets_ms: Vec<f64>,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("policy,seed");
        for b in &self.budgets_ms {
            write!(out, ",acc@{b}").unwrap();
        }
        for b in &self.budgets_ms {
            write!(out, ",loss@{b}").unwrap();
        }
        out.push('\n');
        for r in &self.rows {
            write!(out, "{},{}", r.policy, r.seed).unwrap();
            for c in r.accuracy.iter().chain(&r.loss) {
                write!(out, ",{c}").unwrap();
            }
            out.push('\n');
        }
        out
    }
}

/// Accuracy and loss of one run at each budget.
pub fn tabulate(art: &RunArtifacts, budgets_ms: &[f64]) -> SweepRow {
    let total = art.summary.total_sim_ms;
    let at = |b: f64, value: Option<f64>| {
        if b > total {
            Cell::NotAvailable
        } else {
            value.map_or(Cell::Missing, Cell::Value)
        }
    };
    let accuracy = budgets_ms
        .iter()
        .map(|&b| {
            let v = art
                .probes
                .iter()
                .take_while(|p| p.sim_time_ms <= b)
                .last()
                .map(|p| p.test_accuracy);
            at(b, v)
        })
        .collect();
    let loss = budgets_ms
        .iter()
        .map(|&b| {
            let v = art
                .trace
                .iter()
                .take_while(|r| r.sim_time_ms <= b)
                .last()
                .map(|r| r.loss);
            at(b, v)
        })
        .collect();
    SweepRow {
        policy: art.summary.policy.clone(),
        seed: art.summary.seed,
        accuracy,
        loss,
    }
}

/// Runs every config (in parallel, each into its own output dir) and builds
/// the comparison table in config order.
pub fn run_sweep(configs: &[ExperimentConfig], budgets_ms: &[f64]) -> Result<(SweepTable, Vec<RunArtifacts>)> {
    if configs.is_empty() {
        return Err(Error::config("configs", "sweep needs at least one config"));
    }
    if budgets_ms.iter().any(|b| !b.is_finite() || *b < 0.0) {
        return Err(Error::config("budgets", "budgets must be finite and non-negative"));
    }
    let mut seen = HashSet::new();
    for c in configs {
        if !seen.insert(c.output_dir.clone()) {
            return Err(Error::config(
                "output_dir",
                format!("{} used by more than one run", c.output_dir.display()),
            ));
        }
    }
    let runs: Vec<RunArtifacts> = configs
        .par_iter()
        .map(run_experiment)
        .collect::<Result<_>>()?;
    let rows = runs.iter().map(|a| tabulate(a, budgets_ms)).collect();
    Ok((
        SweepTable {
            budgets_ms: budgets_ms.to_vec(),
            rows,
        },
        runs,
    ))
}

pub fn write_table(path: &Path, table: &SweepTable) -> Result<()> {
    std::fs::write(path, table.to_csv()).map_err(|e| Error::io(path, e))
}
