//! `report`: one table row per directory of `{seed}.csv` traces.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use crate::runs::{Summary, TraceRow};

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub config: String,
    pub seeds: usize,
    /// Median over seeds of the last round's training loss; `None` when no
    /// run completed a round.
    pub median_final_train_loss: Option<f64>,
    pub median_oracle_calls: f64,
    pub diverged: usize,
}

fn median(xs: &mut [f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    Some(if n % 2 == 1 { xs[n / 2] } else { 0.5 * (xs[n / 2 - 1] + xs[n / 2]) })
}

fn collect_trace_dirs(dir: &Path, found: &mut BTreeMap<PathBuf, Vec<(u64, PathBuf)>>) -> Result<()> {
    let mut entries: Vec<_> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .collect::<std::io::Result<_>>()?;
    entries.sort_by_key(|e| e.path());
    for entry in entries {
        let path = entry.path();
        if path.is_dir() {
            collect_trace_dirs(&path, found)?;
            continue;
        }
        let seed = path
            .extension()
            .filter(|e| *e == "csv")
            .and_then(|_| path.file_stem()?.to_str()?.parse::<u64>().ok());
        if let Some(seed) = seed {
            found.entry(dir.to_path_buf()).or_default().push((seed, path));
        }
    }
    Ok(())
}

fn read_trace(path: &Path) -> Result<Vec<TraceRow>> {
    let mut reader = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    reader
        .deserialize()
        .collect::<Result<_, _>>()
        .with_context(|| format!("parsing {}", path.display()))
}

pub fn build_report(root: &Path) -> Result<Vec<ReportRow>> {
    if !root.is_dir() {
        bail!("{} is not a directory", root.display());
    }
    let mut found = BTreeMap::new();
    collect_trace_dirs(root, &mut found)?;

    let mut rows = Vec::new();
    for (dir, mut traces) in found {
        traces.sort();
        // divergence flags live in summary.json; without one, fall back to
        // a non-finite final loss
        let summary: Option<Summary> = fs::read_to_string(dir.join("summary.json"))
            .ok()
            .and_then(|s| serde_json::from_str(&s).ok());

        let mut finals = Vec::new();
        let mut calls = Vec::new();
        let mut diverged = 0;
        for (seed, path) in &traces {
            let rows = read_trace(path)?;
            let last = rows.last().map(|r| r.train_loss);
            finals.extend(last);
            calls.push(rows.iter().map(|r| r.oracle_calls).sum::<u64>() as f64);
            let flagged = summary
                .as_ref()
                .and_then(|s| s.runs.iter().find(|r| r.seed == *seed))
                .map(|r| r.diverged);
            if flagged.unwrap_or_else(|| last.is_some_and(|l| !l.is_finite())) {
                diverged += 1;
            }
        }
        let config = match dir.strip_prefix(root) {
            Ok(p) if p.as_os_str().is_empty() => ".".to_string(),
            Ok(p) => p.display().to_string(),
            Err(_) => dir.display().to_string(),
        };
        rows.push(ReportRow {
            config,
            seeds: traces.len(),
            median_final_train_loss: median(&mut finals),
            median_oracle_calls: median(&mut calls).unwrap_or(0.0),
            diverged,
        });
    }
    if rows.is_empty() {
        bail!("no runs found");
    }
    Ok(rows)
}

pub fn render(rows: &[ReportRow]) -> String {
    let width = rows.iter().map(|r| r.config.len()).max().unwrap_or(0).max("config".len());
    let mut out = format!(
        "{:<width$}  {:>5}  {:>16}  {:>12}  {:>8}\n",
        "config", "seeds", "median_final", "oracle_calls", "diverged"
    );
    for r in rows {
        let loss = r.median_final_train_loss.map_or("-".to_string(), |l| format!("{l:.6e}"));
        out.push_str(&format!(
            "{:<width$}  {:>5}  {:>16}  {:>12}  {:>8}\n",
            r.config, r.seeds, loss, r.median_oracle_calls, r.diverged
        ));
    }
    out
}
