//! Cartesian hyper-parameter grids.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{value_label, ExperimentConfig, GridAxis};
use crate::error::{HarnessError, Result};
use crate::training::{run_training, RunRecord};

/// One grid point: `(key, value)` per axis, in axis order.
pub type Cell = Vec<(String, toml::Value)>;

/// Every combination of axis values, first axis varying slowest.
pub fn cells(axes: &[GridAxis]) -> Vec<Cell> {
    let mut out: Vec<Cell> = vec![Vec::new()];
    for axis in axes {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                axis.values.iter().map(move |v| {
                    let mut c = prefix.clone();
                    c.push((axis.key.clone(), v.clone()));
                    c
                })
            })
            .collect();
    }
    out
}

fn cell_config(base: &ExperimentConfig, cell: &Cell) -> Result<ExperimentConfig> {
    let mut config = base.clone();
    for (key, value) in cell {
        config = config.with_value(key, value.clone())?;
    }
    config.grid = None;
    Ok(config)
}

fn label(cell: &Cell) -> Vec<(String, String)> {
    cell.iter().map(|(k, v)| (k.clone(), value_label(v))).collect()
}

/// Trains every cell with every seed of `config`. Cells and seeds run in
/// parallel; records come back cell-major, seed-minor. A cell whose config
/// is invalid or whose run fails yields records with a failure status.
pub fn run_grid(config: &ExperimentConfig) -> Result<Vec<RunRecord>> {
    let axes = config.grid.as_ref().map(|g| g.axis.as_slice()).unwrap_or(&[]);
    let cells = cells(axes);
    let jobs: Vec<(&Cell, u64)> = cells
        .iter()
        .flat_map(|c| config.seeds.iter().map(move |&s| (c, s)))
        .collect();
    jobs.par_iter()
        .map(|&(cell, seed)| {
            let mut record = match cell_config(config, cell) {
                Ok(c) => match run_training(&c, seed) {
                    Ok(r) => r,
                    Err(e @ HarnessError::Io { .. }) | Err(e @ HarnessError::Data { .. }) => return Err(e),
                    Err(e) => RunRecord::failed(&c, seed, e.to_string()),
                },
                Err(e) => RunRecord::failed(config, seed, e.to_string()),
            };
            record.cell = label(cell);
            Ok(record)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub cell: Vec<(String, String)>,
    pub runs: usize,
    pub failed: usize,
    pub test_mean: Option<f64>,
    pub test_std: Option<f64>,
    pub heldout_mean: Option<f64>,
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> Option<(f64, f64)> {
    if xs.is_empty() {
        return None;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}

type Group<'a> = (&'a [(String, String)], Vec<&'a RunRecord>);

/// Aggregates records by cell (in first-seen order) over seeds, using the
/// final epoch's accuracies of successful runs.
pub fn summarize(records: &[RunRecord]) -> Vec<CellSummary> {
    let mut out: Vec<Group> = Vec::new();
    for r in records {
        match out.iter_mut().find(|(c, _)| *c == r.cell.as_slice()) {
            Some((_, rs)) => rs.push(r),
            None => out.push((&r.cell, vec![r])),
        }
    }
    out.into_iter()
        .map(|(cell, rs)| {
            let ok: Vec<_> = rs.iter().filter(|r| r.is_ok()).collect();
            let test: Vec<f64> = ok.iter().filter_map(|r| r.last()?.test_accuracy).collect();
            let heldout: Vec<f64> = ok.iter().filter_map(|r| r.last()?.heldout_accuracy).collect();
            let t = mean_std(&test);
            CellSummary {
                cell: cell.to_vec(),
                runs: rs.len(),
                failed: rs.len() - ok.len(),
                test_mean: t.map(|t| t.0),
                test_std: t.map(|t| t.1),
                heldout_mean: mean_std(&heldout).map(|h| h.0),
            }
        })
        .collect()
}

/// Index of the cell with the highest value of `key`; ties go to the
/// earlier cell.
pub fn best_by(summaries: &[CellSummary], key: impl Fn(&CellSummary) -> Option<f64>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, s) in summaries.iter().enumerate() {
        if let Some(v) = key(s) {
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((i, v));
            }
        }
    }
    best.map(|b| b.0)
}
