use serde::{Deserialize, Serialize};

use super::metrics::MetricSet;
use super::run::TrainConfig;
use crate::error::{Error, Result};

/// Hyperparameter grid over learning rate and warmup, each cell averaged
/// over `seeds`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    pub lrs: Vec<f64>,
    pub warmups: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl Grid {
    pub fn single(cfg: &TrainConfig) -> Self {
        Self { lrs: vec![cfg.lr], warmups: vec![cfg.warmup], seeds: vec![cfg.seed] }
    }

    pub fn cells(&self) -> usize {
        self.lrs.len() * self.warmups.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub lr: f64,
    pub warmup: f64,
    /// Metrics of the seeds that finished; diverged seeds are listed in
    /// `failed`.
    pub runs: Vec<(u64, MetricSet)>,
    pub failed: Vec<(u64, String)>,
    /// Mean selection score over finished seeds; `None` when none finished.
    pub mean_score: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub rows: Vec<GridRow>,
    pub best: usize,
}

impl GridResult {
    pub fn best_row(&self) -> &GridRow {
        &self.rows[self.best]
    }
}

/// Runs every cell of `grid` on top of `base` and returns the full table
/// with the index of the cell with the best mean dev score. A cell counts
/// only if all of its seeds finished; runs that fail are recorded, not
/// fatal, unless every cell fails.
pub fn grid_search(base: &TrainConfig, grid: &Grid, mut run: impl FnMut(&TrainConfig) -> Result<MetricSet>) -> Result<GridResult> {
    if grid.cells() == 0 || grid.seeds.is_empty() {
        return Err(Error::Empty("grid"));
    }
    let mut rows = Vec::new();
    for &lr in &grid.lrs {
        for &warmup in &grid.warmups {
            let mut row = GridRow { lr, warmup, runs: Vec::new(), failed: Vec::new(), mean_score: None };
            for &seed in &grid.seeds {
                let cfg = TrainConfig { lr, warmup, seed, ..base.clone() };
                match run(&cfg) {
                    Ok(m) if m.score().is_finite() => row.runs.push((seed, m)),
                    Ok(m) => row.failed.push((seed, format!("non-finite metric {:?}", m.primary()))),
                    Err(e) => row.failed.push((seed, e.to_string())),
                }
            }
            if row.failed.is_empty() {
                row.mean_score = Some(row.runs.iter().map(|(_, m)| m.score()).sum::<f64>() / row.runs.len() as f64);
            }
            rows.push(row);
        }
    }
    let best = rows
        .iter()
        .enumerate()
        .filter_map(|(i, r)| r.mean_score.map(|s| (i, s)))
        .fold(None, |b: Option<(usize, f64)>, (i, s)| match b {
            Some((_, bs)) if bs >= s => b,
            _ => Some((i, s)),
        })
        .map(|(i, _)| i)
        .ok_or_else(|| Error::InvalidArgument(format!("every grid cell failed: {:?}", rows.iter().flat_map(|r| &r.failed).next())))?;
    Ok(GridResult { rows, best })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn acc(v: f64) -> MetricSet {
        MetricSet::Accuracy { value: v, count: 10 }
    }

    #[test]
    fn single_cell() {
        let base = TrainConfig::default();
        let r = grid_search(&base, &Grid::single(&base), |_| Ok(acc(0.3))).unwrap();
        assert_eq!(r.rows.len(), 1);
        assert_eq!(r.best_row().mean_score, Some(0.3));
    }

    #[test]
    fn diverging_cell_loses() {
        let base = TrainConfig::default();
        let grid = Grid { lrs: vec![1e-3, 10.0], warmups: vec![0.0], seeds: vec![1] };
        let r = grid_search(&base, &grid, |c| {
            if c.lr > 1.0 {
                Err(Error::Diverged { step: 3, last_good: Some(2), cause: "loss".into() })
            } else {
                Ok(acc(0.1))
            }
        })
        .unwrap();
        assert_eq!(r.best_row().lr, 1e-3);
        assert_eq!(r.rows[1].failed.len(), 1);
    }

    #[test]
    fn averages_seeds_and_picks_the_max() {
        let base = TrainConfig::default();
        let grid = Grid { lrs: vec![1.0, 2.0, 3.0], warmups: vec![0.0, 0.1], seeds: vec![1, 2, 3] };
        let r = grid_search(&base, &grid, |c| Ok(acc((c.lr * 7.0 + c.warmup * 13.0 + c.seed as f64) % 1.0 / 2.0))).unwrap();
        let best = r.best_row().mean_score.unwrap();
        assert!(r.rows.iter().all(|row| row.mean_score.unwrap() <= best));
        assert_eq!(r.rows.len(), 6);
        assert!(r.rows.iter().all(|row| row.runs.len() == 3));
    }
}
