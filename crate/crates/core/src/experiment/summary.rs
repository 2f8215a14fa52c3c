//! Final-round tables: one row per evaluated model and prediction variant,
//! with metric columns `acc, ece, nll, brier` in that order.

use std::fs;
use std::path::{Path, PathBuf};

use super::runner::{read_metrics, METRICS_FILE};
use crate::error::{Error, Result};
use crate::metrics::MetricsRecord;

pub const SUMMARY_HEADER: &str = "run,algorithm,split,variant,round,acc,ece,nll,brier";

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub run: String,
    pub algorithm: String,
    pub split: String,
    /// `@mean` for predictions at the posterior mean, `MC` for Monte Carlo
    /// averaged predictions.
    pub variant: String,
    pub round: usize,
    pub acc: f64,
    pub ece: f64,
    pub nll: f64,
    pub brier: f64,
}

pub fn variant_name(mc_samples: usize) -> &'static str {
    if mc_samples == 0 {
        "@mean"
    } else {
        "MC"
    }
}

/// Rows for the last evaluated round in `records`.
pub fn summarize_run(run: &str, records: &[MetricsRecord]) -> Result<Vec<SummaryRow>> {
    let Some(last) = records.iter().map(|r| r.round).max() else {
        return Ok(Vec::new());
    };
    Ok(records
        .iter()
        .filter(|r| r.round == last)
        .map(|r| SummaryRow {
            run: run.to_string(),
            algorithm: r.algorithm.clone(),
            split: r.split.clone(),
            variant: variant_name(r.mc_samples).into(),
            round: r.round,
            acc: r.acc,
            ece: r.ece,
            nll: r.nll,
            brier: r.brier,
        })
        .collect())
}

fn find_runs(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    if dir.join(METRICS_FILE).is_file() {
        out.push(dir.to_path_buf());
        return Ok(());
    }
    let mut children: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    children.sort();
    for c in children {
        find_runs(&c, out)?;
    }
    Ok(())
}

/// Label of a run directory: its path relative to the parent of `root`.
fn run_label(root: &Path, run: &Path) -> String {
    let base = root.parent().unwrap_or(Path::new(""));
    let rel = run.strip_prefix(base).unwrap_or(run);
    rel.components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}

/// Summarizes a run directory, or every run found beneath `dir`.
pub fn summarize(dir: &Path) -> Result<Vec<SummaryRow>> {
    if !dir.is_dir() {
        return Err(Error::InvalidArgument(format!("{} is not a directory", dir.display())));
    }
    let mut runs = Vec::new();
    find_runs(dir, &mut runs)?;
    if runs.is_empty() {
        return Err(Error::InvalidArgument(format!("no runs found under {}", dir.display())));
    }
    let mut rows = Vec::new();
    for run in runs {
        let records = read_metrics(&run.join(METRICS_FILE), None)?;
        rows.extend(summarize_run(&run_label(dir, &run), &records)?);
    }
    Ok(rows)
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.run, r.algorithm, r.split, r.variant, r.round, r.acc, r.ece, r.nll, r.brier
        ));
    }
    out
}

pub fn summary_markdown(rows: &[SummaryRow]) -> String {
    let mut out = String::from("| run | algorithm | split | variant | round | acc | ece | nll | brier |\n");
    out.push_str("|---|---|---|---|---|---|---|---|---|\n");
    for r in rows {
        out.push_str(&format!(
            "| {} | {} | {} | {} | {} | {:.4} | {:.4} | {:.4} | {:.4} |\n",
            r.run, r.algorithm, r.split, r.variant, r.round, r.acc, r.ece, r.nll, r.brier
        ));
    }
    out
}
