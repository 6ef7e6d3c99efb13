//! JSON and CSV renderings of reports. Floats are written in shortest
//! round-trip form.

use std::fs;
use std::path::Path;

use negmerge_core::analysis::{LambdaSweep, SparsityReport};
use negmerge_harness::experiment::{ExperimentReport, SeedReport};
use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, clap::ValueEnum)]
pub enum OutputFormat {
    #[default]
    Json,
    Csv,
}

pub fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("reports serialize")
}

fn csv_string(write: impl FnOnce(&mut csv::Writer<Vec<u8>>) -> csv::Result<()>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    write(&mut w).expect("in-memory CSV cannot fail");
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("CSV is UTF-8")
}

#[derive(Serialize)]
struct SparsityRow<'a> {
    kind: &'a str,
    name: &'a str,
    group: &'a str,
    elements: usize,
    zeros: usize,
    zero_fraction: f64,
    layer_start: Option<usize>,
    layer_end: Option<usize>,
}

/// One `total` row, one row per group, then one row per tensor.
pub fn sparsity_csv(r: &SparsityReport) -> String {
    csv_string(|w| {
        w.serialize(SparsityRow {
            kind: "total",
            name: "",
            group: "",
            elements: r.total_elements,
            zeros: r.zero_elements,
            zero_fraction: r.zero_fraction,
            layer_start: None,
            layer_end: None,
        })?;
        for g in &r.per_group {
            w.serialize(SparsityRow {
                kind: "group",
                name: &g.label,
                group: &g.label,
                elements: g.elements,
                zeros: g.zeros,
                zero_fraction: g.zero_fraction,
                layer_start: g.layers.map(|l| l.0),
                layer_end: g.layers.map(|l| l.1),
            })?;
        }
        for t in &r.per_tensor {
            w.serialize(SparsityRow {
                kind: "tensor",
                name: &t.name,
                group: &t.group,
                elements: t.elements,
                zeros: t.zeros,
                zero_fraction: if t.elements == 0 { 0.0 } else { t.zeros as f64 / t.elements as f64 },
                layer_start: None,
                layer_end: None,
            })?;
        }
        Ok(())
    })
}

#[derive(Serialize)]
struct SweepRow {
    lambda: f64,
    retain: f64,
    forget: f64,
    feasible: bool,
    selected: bool,
}

pub fn sweep_csv(s: &LambdaSweep) -> String {
    csv_string(|w| {
        for (i, p) in s.points.iter().enumerate() {
            w.serialize(SweepRow {
                lambda: p.lambda,
                retain: p.retain,
                forget: p.forget,
                feasible: p.feasible,
                selected: i == s.selected_index,
            })?;
        }
        Ok(())
    })
}

/// Seed-averaged comparison table, values in percent.
pub fn experiment_csv(r: &ExperimentReport) -> String {
    csv_string(|w| {
        for row in r.table() {
            w.serialize(row)?;
        }
        Ok(())
    })
}

#[derive(Serialize)]
struct SeedRow<'a> {
    seed: u64,
    method: &'a str,
    lambda: Option<f64>,
    acc_dr: f64,
    acc_df: f64,
    acc_dtest: f64,
    mia: f64,
    avg_gap: f64,
}

/// Per-seed rows (fractions, not percent) for every model in the report.
pub fn seed_csv(s: &SeedReport) -> String {
    csv_string(|w| {
        let mut row = |method: &str, lambda: Option<f64>, e: &negmerge_harness::metrics::EvalReport| {
            w.serialize(SeedRow {
                seed: s.seed,
                method,
                lambda,
                acc_dr: e.acc_dr,
                acc_df: e.acc_df,
                acc_dtest: e.acc_dtest,
                mia: e.mia_efficacy.unwrap_or(0.0),
                avg_gap: e.avg_gap.unwrap_or(0.0),
            })
        };
        row("original", None, &s.original)?;
        row("retrain", None, &s.retrain)?;
        for m in &s.methods {
            row(m.method.as_str(), Some(m.sweep.selected_lambda), &m.report)?;
        }
        Ok(())
    })
}

/// Writes `report.json`, `seed_<s>.json` for each seed and `summary.csv`.
pub fn write_experiment(r: &ExperimentReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: String, text: String| {
        let path = dir.join(name);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    };
    write("report.json".into(), to_json(r))?;
    for s in &r.seeds {
        write(format!("seed_{}.json", s.seed), to_json(s))?;
    }
    write("summary.csv".into(), experiment_csv(r))
}
