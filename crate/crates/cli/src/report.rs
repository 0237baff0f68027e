//! Aggregation of finished runs into summary tables.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::commands::CommandOutput;
use crate::config::RunConfig;
use crate::error::CliError;
use crate::output::{self, fmt_f64, ResultRow, RESULTS_FILE, SUMMARY_FILE};

pub const SUMMARY_HEADER: [&str; 14] = [
    "schema_version",
    "task",
    "variant",
    "L",
    "block_or_window",
    "overlap",
    "g",
    "metric_name",
    "n",
    "mean",
    "median",
    "min",
    "max",
    "flops",
];

/// Statistics of one metric over the seeds of one configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub schema_version: u32,
    pub task: String,
    pub variant: String,
    #[serde(rename = "L")]
    pub len: usize,
    pub block_or_window: usize,
    pub overlap: String,
    pub g: usize,
    pub metric_name: String,
    pub n: usize,
    pub mean: f64,
    pub median: f64,
    pub min: f64,
    pub max: f64,
    pub flops: u64,
}

/// Every `results.csv` at or below `root`, in path order.
pub fn find_results(root: &Path) -> Result<Vec<PathBuf>, CliError> {
    if root.is_file() {
        return Ok(vec![root.to_path_buf()]);
    }
    if !root.is_dir() {
        return Err(CliError::Usage(format!("{} is not a run directory", root.display())));
    }
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        let file = dir.join(RESULTS_FILE);
        if file.is_file() {
            out.push(file);
        }
        for entry in std::fs::read_dir(&dir)? {
            let p = entry?.path();
            if p.is_dir() {
                stack.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}

/// Groups rows by everything but seed and run id; one summary row per
/// group, ordered by task, variant, metric, then L and block size
/// ascending. A run id seen twice (the same run directory listed twice) is
/// counted once.
pub fn summarize(rows: &[ResultRow]) -> Vec<SummaryRow> {
    type Key = (String, String, String, usize, usize, String, usize);
    let mut groups: BTreeMap<Key, (BTreeMap<String, f64>, u64)> = BTreeMap::new();
    for r in rows {
        let key = (r.task.clone(), r.variant.clone(), r.metric_name.clone(), r.len, r.block_or_window, r.overlap.clone(), r.g);
        let e = groups.entry(key).or_insert_with(|| (BTreeMap::new(), r.flops));
        e.0.insert(r.run_id.clone(), r.metric_value);
    }
    groups
        .into_iter()
        .map(|((task, variant, metric_name, len, block_or_window, overlap, g), (vals, flops))| {
            let mut v: Vec<f64> = vals.into_values().collect();
            v.sort_by(f64::total_cmp);
            SummaryRow {
                schema_version: output::SCHEMA_VERSION,
                task,
                variant,
                len,
                block_or_window,
                overlap,
                g,
                metric_name,
                n: v.len(),
                mean: v.iter().sum::<f64>() / v.len() as f64,
                median: median(&v),
                min: v[0],
                max: v[v.len() - 1],
                flops,
            }
        })
        .collect()
}

pub fn write_summary(path: &Path, rows: &[SummaryRow]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(SUMMARY_HEADER)?;
    for r in rows {
        w.write_record([
            r.schema_version.to_string(),
            r.task.clone(),
            r.variant.clone(),
            r.len.to_string(),
            r.block_or_window.to_string(),
            r.overlap.clone(),
            r.g.to_string(),
            r.metric_name.clone(),
            r.n.to_string(),
            fmt_f64(r.mean),
            fmt_f64(r.median),
            fmt_f64(r.min),
            fmt_f64(r.max),
            r.flops.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_summary(path: &Path) -> Result<Vec<SummaryRow>, CliError> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<Vec<_>, _>>()?)
}

pub fn report(cfg: &RunConfig) -> Result<CommandOutput, CliError> {
    let mut rows = Vec::new();
    for root in cfg.runs.as_deref().unwrap_or_default() {
        let files = find_results(root)?;
        if files.is_empty() {
            return Err(CliError::Usage(format!("no {RESULTS_FILE} under {}", root.display())));
        }
        for f in files {
            rows.extend(output::read_results(&f)?);
        }
    }
    let summary = summarize(&rows);
    let dir = cfg.out_dir();
    output::prepare_dir(dir)?;
    output::write_config(dir, cfg)?;
    write_summary(&dir.join(SUMMARY_FILE), &summary)?;
    println!("{:<10} {:<15} {:>6} {:>6} {:<5} {:>2} {:<18} {:>3} {:>12} {:>12}", "task", "variant", "L", "block", "ovl", "g", "metric", "n", "median", "mean");
    for s in &summary {
        println!(
            "{:<10} {:<15} {:>6} {:>6} {:<5} {:>2} {:<18} {:>3} {:>12.5} {:>12.5}",
            s.task, s.variant, s.len, s.block_or_window, s.overlap, s.g, s.metric_name, s.n, s.median, s.mean
        );
    }
    Ok(CommandOutput { out_dir: dir.to_path_buf(), results: rows, curves: Vec::new() })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(id: &str, block: usize, seed: u64, v: f64) -> ResultRow {
        ResultRow {
            schema_version: 1,
            run_id: id.into(),
            variant: "blockwise".into(),
            task: "synthetic".into(),
            len: 512,
            block_or_window: block,
            overlap: "half".into(),
            g: 0,
            seed,
            metric_name: "perplexity".into(),
            metric_value: v,
            flops: 1,
            words_per_sec: None,
        }
    }

    #[test]
    fn median_over_seeds_sorted_by_block() {
        let rows = vec![row("a", 128, 1, 3.0), row("b", 32, 1, 9.0), row("c", 32, 2, 7.0), row("d", 32, 3, 1.0), row("a", 128, 1, 3.0)];
        let s = summarize(&rows);
        assert_eq!(s.iter().map(|r| r.block_or_window).collect::<Vec<_>>(), vec![32, 128]);
        assert_eq!((s[0].n, s[0].median, s[0].min, s[0].max), (3, 7.0, 1.0, 9.0));
        assert_eq!(s[1].n, 1);
    }
}
