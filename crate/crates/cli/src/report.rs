//! CSV outputs: loss traces, metric reports and GV curves.

use std::fmt::Write as _;
use std::path::Path;

use mdvc_core::experiment::{MetricRow, Spread};
use mdvc_core::metrics::GvProfile;
use mdvc_core::train::LossTrace;
use serde::Serialize;

use crate::error::{CliError, Result};

pub const TRACE_FILE: &str = "loss_trace.csv";
pub const REPORT_FILE: &str = "report.csv";
pub const REPORT_HEADER: [&str; 5] = ["pair", "variant", "seed", "metric", "value"];
pub const GV_HEADER: [&str; 2] = ["dim", "value"];
pub const METRICS: [&str; 2] = ["mcd", "msd"];

fn csv_err(path: &Path, e: csv::Error) -> CliError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => CliError::io(path, io),
        other => CliError::Format(format!("{}: {other:?}", path.display())),
    }
}

fn flush(path: &Path, mut w: csv::Writer<std::fs::File>) -> Result<()> {
    w.flush().map_err(|e| CliError::io(path, e))
}

#[derive(Serialize)]
struct TraceRow {
    step: u64,
    stage: u8,
    speaker: usize,
    total: f64,
    kl: f64,
    recon: f64,
    cycle_kl: f64,
    cycle_recon: f64,
    /// Sum of the unweighted per-speaker adversarial terms.
    wgan: f64,
    critic: Option<f64>,
    wall_secs: f64,
}

pub fn write_trace(trace: &LossTrace, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for e in &trace.entries {
        let r = &e.report;
        w.serialize(TraceRow {
            step: e.step,
            stage: e.stage,
            speaker: e.speaker,
            total: r.total,
            kl: r.kl,
            recon: r.recon,
            cycle_kl: r.cycle_kl,
            cycle_recon: r.cycle_recon,
            wgan: r.wgan.iter().sum(),
            critic: e.critic,
            wall_secs: e.wall_secs,
        })
        .map_err(|e| csv_err(path, e))?;
    }
    if trace.entries.is_empty() {
        w.write_record([
            "step",
            "stage",
            "speaker",
            "total",
            "kl",
            "recon",
            "cycle_kl",
            "cycle_recon",
            "wgan",
            "critic",
            "wall_secs",
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    flush(path, w)
}

/// Table rows of one condition at one seed.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedRows {
    pub variant: String,
    pub seed: u64,
    pub rows: Vec<MetricRow>,
}

/// A row label of one condition reduced over seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionRow {
    pub label: String,
    pub mcd: Spread,
    pub msd: Spread,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionSummary {
    pub variant: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<ConditionRow>,
}

/// Groups runs by condition, in order of first appearance, and reduces each
/// row label over seeds.
pub fn summarize_conditions(runs: &[SeedRows]) -> Vec<ConditionSummary> {
    let mut variants: Vec<&str> = Vec::new();
    for r in runs {
        if !variants.contains(&r.variant.as_str()) {
            variants.push(&r.variant);
        }
    }
    variants
        .into_iter()
        .map(|v| {
            let of: Vec<&SeedRows> = runs.iter().filter(|r| r.variant == v).collect();
            let mut labels: Vec<&str> = Vec::new();
            for r in &of {
                for row in &r.rows {
                    if !labels.contains(&row.label.as_str()) {
                        labels.push(&row.label);
                    }
                }
            }
            let rows = labels
                .into_iter()
                .map(|label| {
                    let pick = |f: fn(&MetricRow) -> f64| -> Vec<f64> {
                        of.iter()
                            .filter_map(|r| r.rows.iter().find(|x| x.label == label).map(f))
                            .collect()
                    };
                    ConditionRow {
                        label: label.into(),
                        mcd: Spread::of(&pick(|r| r.mcd)),
                        msd: Spread::of(&pick(|r| r.msd)),
                    }
                })
                .collect();
            ConditionSummary {
                variant: v.into(),
                seeds: of.iter().map(|r| r.seed).collect(),
                rows,
            }
        })
        .collect()
}

/// Writes one line per (row, seed, metric) followed by `mean` and `std`
/// lines per (condition, row, metric).
pub fn write_report(runs: &[SeedRows], path: &Path) -> Result<Vec<ConditionSummary>> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(REPORT_HEADER).map_err(|e| csv_err(path, e))?;
    for r in runs {
        for row in &r.rows {
            for (metric, value) in METRICS.iter().zip([row.mcd, row.msd]) {
                w.write_record([row.label.as_str(), &r.variant, &r.seed.to_string(), metric, &value.to_string()])
                    .map_err(|e| csv_err(path, e))?;
            }
        }
    }
    let summaries = summarize_conditions(runs);
    for s in &summaries {
        for row in &s.rows {
            for (metric, spread) in METRICS.iter().zip([row.mcd, row.msd]) {
                for (seed, value) in [("mean", spread.mean), ("std", spread.std)] {
                    w.write_record([row.label.as_str(), &s.variant, seed, metric, &value.to_string()])
                        .map_err(|e| csv_err(path, e))?;
                }
            }
        }
    }
    flush(path, w)?;
    Ok(summaries)
}

pub fn gv_file_name(condition: &str) -> String {
    format!("gv_{condition}.csv")
}

pub fn write_gv(gv: &GvProfile, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(GV_HEADER).map_err(|e| csv_err(path, e))?;
    for (d, v) in gv.per_dim.iter().enumerate() {
        w.write_record([d.to_string(), v.to_string()]).map_err(|e| csv_err(path, e))?;
    }
    flush(path, w)
}

/// Plain-text table of `mean ± std` per row and condition.
pub fn format_table(summaries: &[ConditionSummary]) -> String {
    let mut s = String::new();
    for c in summaries {
        let _ = writeln!(s, "{} (seeds {:?})", c.variant, c.seeds);
        for r in &c.rows {
            let _ = writeln!(
                s,
                "  {:<8} MCD {:>7.3} ± {:<6.3} MSD {:>7.3} ± {:<6.3}",
                r.label, r.mcd.mean, r.mcd.std, r.msd.mean, r.msd.std
            );
        }
    }
    s
}
