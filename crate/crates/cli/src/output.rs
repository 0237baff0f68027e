//! Result tables and their on-disk formats.

use std::fs;
use std::io::Write;
use std::path::Path;

use longattn_core::attention::Overlap;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::CliError;

pub const SCHEMA_VERSION: u32 = 1;

pub const RESULTS_FILE: &str = "results.csv";
pub const CURVES_FILE: &str = "curves.csv";
pub const CONFIG_FILE: &str = "config.json";
pub const COST_FILE: &str = "cost_reports.jsonl";
pub const CHECKS_FILE: &str = "checks.csv";
pub const GRID_FILE: &str = "grid.csv";
pub const SUMMARY_FILE: &str = "summary.csv";

pub const RESULT_HEADER: [&str; 13] = [
    "schema_version",
    "run_id",
    "variant",
    "task",
    "L",
    "block_or_window",
    "overlap",
    "g",
    "seed",
    "metric_name",
    "metric_value",
    "flops",
    "words_per_sec",
];
pub const CURVE_HEADER: [&str; 4] = ["run_id", "step", "metric_name", "value"];

/// Floats are written with 17 significant digits so every value re-parses
/// to the same `f64`.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn overlap_name(o: Option<Overlap>) -> &'static str {
    match o {
        Some(Overlap::Half) => "half",
        Some(Overlap::None) => "none",
        None => "",
    }
}

/// One metric of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub schema_version: u32,
    pub run_id: String,
    pub variant: String,
    pub task: String,
    #[serde(rename = "L")]
    pub len: usize,
    pub block_or_window: usize,
    pub overlap: String,
    pub g: usize,
    pub seed: u64,
    pub metric_name: String,
    pub metric_value: f64,
    pub flops: u64,
    pub words_per_sec: Option<f64>,
}

impl ResultRow {
    fn record(&self) -> Vec<String> {
        vec![
            self.schema_version.to_string(),
            self.run_id.clone(),
            self.variant.clone(),
            self.task.clone(),
            self.len.to_string(),
            self.block_or_window.to_string(),
            self.overlap.clone(),
            self.g.to_string(),
            self.seed.to_string(),
            self.metric_name.clone(),
            fmt_f64(self.metric_value),
            self.flops.to_string(),
            self.words_per_sec.map(fmt_f64).unwrap_or_default(),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub run_id: String,
    pub step: usize,
    pub metric_name: String,
    pub value: f64,
}

fn write_csv<const N: usize>(path: &Path, header: [&str; N], rows: impl Iterator<Item = Vec<String>>) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_results(path: &Path, rows: &[ResultRow]) -> Result<(), CliError> {
    write_csv(path, RESULT_HEADER, rows.iter().map(ResultRow::record))
}

pub fn write_curves(path: &Path, rows: &[CurveRow]) -> Result<(), CliError> {
    write_csv(
        path,
        CURVE_HEADER,
        rows.iter().map(|r| vec![r.run_id.clone(), r.step.to_string(), r.metric_name.clone(), fmt_f64(r.value)]),
    )
}

fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, CliError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    r.deserialize().map(|row| row.map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))).collect()
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRow>, CliError> {
    let rows: Vec<ResultRow> = read_csv(path)?;
    if let Some(r) = rows.iter().find(|r| r.schema_version != SCHEMA_VERSION) {
        return Err(CliError::Runtime(format!("{}: unsupported schema_version {}", path.display(), r.schema_version)));
    }
    Ok(rows)
}

pub fn read_curves(path: &Path) -> Result<Vec<CurveRow>, CliError> {
    read_csv(path)
}

pub fn write_config(dir: &Path, cfg: &RunConfig) -> Result<(), CliError> {
    fs::write(dir.join(CONFIG_FILE), cfg.to_json() + "\n")?;
    Ok(())
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), CliError> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for it in items {
        serde_json::to_writer(&mut f, it)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

/// Creates the output directory, failing early when it cannot be written.
pub fn prepare_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("cannot create output directory {}: {e}", dir.display())))?;
    let probe = dir.join(".write-test");
    fs::write(&probe, b"").map_err(|e| CliError::Runtime(format!("output directory {} is not writable: {e}", dir.display())))?;
    fs::remove_file(probe)?;
    Ok(())
}
