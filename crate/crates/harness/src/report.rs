//! CSV tables and plot-data files built from run records.
//!
//! Every report is a `<kind>.csv` with a header row plus a `<kind>.dat` with
//! one `x y series` triple per line. Numbers use 12 significant digits and
//! no wall-clock value is ever written, so repeated runs give identical files.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{HarnessError, Result};
use crate::format::{g12, opt};
use crate::grid::{best_by, summarize};
use crate::training::RunRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportKind {
    AccuracyTable,
    Heatmap,
    SharpnessCurve,
    RobustnessCurve,
    TradeoffScatter,
    LifelongTable,
}

impl ReportKind {
    pub const ALL: [ReportKind; 6] = [
        ReportKind::AccuracyTable,
        ReportKind::Heatmap,
        ReportKind::SharpnessCurve,
        ReportKind::RobustnessCurve,
        ReportKind::TradeoffScatter,
        ReportKind::LifelongTable,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ReportKind::AccuracyTable => "accuracy-table",
            ReportKind::Heatmap => "heatmap",
            ReportKind::SharpnessCurve => "sharpness-curve",
            ReportKind::RobustnessCurve => "robustness-curve",
            ReportKind::TradeoffScatter => "tradeoff-scatter",
            ReportKind::LifelongTable => "lifelong-table",
        }
    }
}

impl FromStr for ReportKind {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        ReportKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| HarnessError::config(format!("unknown report kind `{s}`")))
    }
}

impl std::fmt::Display for ReportKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Rows of a table plus its plot points.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
    pub points: Vec<(f64, f64, String)>,
}

impl Table {
    fn new(header: &[&str]) -> Self {
        Table {
            header: header.iter().map(|h| h.to_string()).collect(),
            ..Table::default()
        }
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header)?;
        for row in &self.rows {
            w.write_record(row)?;
        }
        let bytes = w.into_inner().map_err(|e| HarnessError::config(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn to_dat(&self) -> String {
        let mut out = String::new();
        for (x, y, series) in &self.points {
            let _ = writeln!(out, "{} {} {}", g12(*x), g12(*y), series);
        }
        out
    }
}

fn cell_label(r: &RunRecord) -> String {
    r.cell
        .iter()
        .map(|(k, v)| format!("{k}={v}"))
        .collect::<Vec<_>>()
        .join(";")
}

/// Whitespace-free name of a run for plot-data files.
pub fn series(r: &RunRecord) -> String {
    let mut s = format!("{}/seed{}", r.label, r.seed);
    if !r.cell.is_empty() {
        s.push('/');
        s.push_str(&cell_label(r));
    }
    s.split_whitespace().collect::<Vec<_>>().join("_")
}

fn accuracy_table(records: &[RunRecord]) -> Table {
    let mut t = Table::new(&[
        "label",
        "seed",
        "cell",
        "variant",
        "geometry",
        "rho",
        "k",
        "alpha",
        "status",
        "epochs",
        "train_loss",
        "train_acc",
        "test_acc",
        "heldout_acc",
        "outer_steps",
        "gradient_evals",
        "basin",
    ]);
    for r in records {
        let o = &r.optimizer;
        let last = r.last();
        t.rows.push(vec![
            r.label.clone(),
            r.seed.to_string(),
            cell_label(r),
            o.variant.to_string(),
            o.geometry.to_string(),
            g12(o.rho),
            o.k.to_string(),
            g12(o.alpha),
            r.status.clone(),
            last.map_or(0, |m| m.epoch).to_string(),
            last.map_or(String::new(), |m| g12(m.train_loss)),
            opt(last.and_then(|m| m.train_accuracy)),
            opt(last.and_then(|m| m.test_accuracy)),
            opt(last.and_then(|m| m.heldout_accuracy)),
            last.map_or(0, |m| m.outer_steps).to_string(),
            last.map_or(0, |m| m.gradient_evals).to_string(),
            r.basin.clone().unwrap_or_default(),
        ]);
        for m in &r.epochs {
            if let Some(acc) = m.test_accuracy.or(m.train_accuracy) {
                t.points.push((m.epoch as f64, acc, series(r)));
            } else {
                t.points.push((m.epoch as f64, m.train_loss, series(r)));
            }
        }
    }
    t
}

/// Per-epoch metrics of every run.
pub fn epochs_table(records: &[RunRecord]) -> Table {
    let mut t = Table::new(&[
        "label",
        "seed",
        "cell",
        "epoch",
        "lr",
        "train_loss",
        "train_acc",
        "test_acc",
        "heldout_acc",
        "outer_steps",
        "gradient_evals",
    ]);
    for r in records {
        for m in &r.epochs {
            t.rows.push(vec![
                r.label.clone(),
                r.seed.to_string(),
                cell_label(r),
                m.epoch.to_string(),
                g12(m.lr),
                g12(m.train_loss),
                opt(m.train_accuracy),
                opt(m.test_accuracy),
                opt(m.heldout_accuracy),
                m.outer_steps.to_string(),
                m.gradient_evals.to_string(),
            ]);
            t.points.push((m.epoch as f64, m.train_loss, series(r)));
        }
    }
    t
}

fn heatmap(records: &[RunRecord]) -> Table {
    let summaries = summarize(records);
    let keys: Vec<String> = summaries
        .first()
        .map(|s| s.cell.iter().map(|(k, _)| k.clone()).collect())
        .unwrap_or_default();
    let mut header: Vec<&str> = keys.iter().map(String::as_str).collect();
    header.extend(["runs", "failed", "test_mean", "test_std", "heldout_mean"]);
    let mut t = Table::new(&header);
    for s in &summaries {
        let mut row: Vec<String> = s.cell.iter().map(|(_, v)| v.clone()).collect();
        row.extend([
            s.runs.to_string(),
            s.failed.to_string(),
            opt(s.test_mean),
            opt(s.test_std),
            opt(s.heldout_mean),
        ]);
        t.rows.push(row);
        // x: first axis, series: the remaining axes.
        if let (Some((_, x)), Some(y)) = (s.cell.first(), s.test_mean) {
            if let Ok(x) = x.parse::<f64>() {
                let rest: Vec<String> = s.cell[1..].iter().map(|(k, v)| format!("{k}={v}")).collect();
                let name = if rest.is_empty() {
                    "grid".to_string()
                } else {
                    rest.join(";")
                };
                t.points.push((x, y, name));
            }
        }
    }
    t
}

/// Best cell by mean test accuracy and by mean held-out accuracy.
pub fn best_table(records: &[RunRecord]) -> Table {
    let summaries = summarize(records);
    let mut t = Table::new(&["selector", "cell", "test_mean", "test_std", "heldout_mean"]);
    let selectors: [(&str, Option<usize>); 2] = [
        ("best-on-test", best_by(&summaries, |s| s.test_mean)),
        ("best-on-heldout", best_by(&summaries, |s| s.heldout_mean)),
    ];
    for (name, idx) in selectors {
        if let Some(s) = idx.map(|i| &summaries[i]) {
            let cell = s
                .cell
                .iter()
                .map(|(k, v)| format!("{k}={v}"))
                .collect::<Vec<_>>()
                .join(";");
            t.rows.push(vec![
                name.into(),
                cell,
                opt(s.test_mean),
                opt(s.test_std),
                opt(s.heldout_mean),
            ]);
        }
    }
    t
}

fn sharpness_curve(records: &[RunRecord]) -> Table {
    let mut t = Table::new(&["label", "seed", "cell", "radius", "sharpness"]);
    for r in records {
        for &(radius, s) in r.sharpness.iter().flatten() {
            t.rows.push(vec![
                r.label.clone(),
                r.seed.to_string(),
                cell_label(r),
                g12(radius),
                g12(s),
            ]);
            t.points.push((radius, s, series(r)));
        }
    }
    t
}

fn robustness_curve(records: &[RunRecord]) -> Table {
    let mut t = Table::new(&["label", "seed", "cell", "sigma", "trial_count", "acc_mean", "acc_std"]);
    for r in records {
        for row in r.robustness.iter().flatten() {
            t.rows.push(vec![
                r.label.clone(),
                r.seed.to_string(),
                cell_label(r),
                g12(row.sigma),
                row.trials.to_string(),
                g12(row.acc_mean),
                g12(row.acc_std),
            ]);
            t.points.push((row.sigma, row.acc_mean, series(r)));
        }
    }
    t
}

fn tradeoff_scatter(records: &[RunRecord]) -> Table {
    let mut t = Table::new(&["loss", "sharpness", "label", "seed", "cell", "radius"]);
    for r in records {
        if let Some(p) = &r.tradeoff {
            t.rows.push(vec![
                g12(p.loss),
                g12(p.sharpness),
                r.label.clone(),
                r.seed.to_string(),
                cell_label(r),
                g12(p.radius),
            ]);
            t.points.push((p.loss, p.sharpness, series(r)));
        }
    }
    t
}

fn lifelong_table(records: &[RunRecord]) -> Table {
    let mut t = Table::new(&[
        "label",
        "method",
        "seed",
        "status",
        "tasks",
        "avg_accuracy",
        "forgetting",
        "matrix",
    ]);
    for r in records {
        let Some(l) = &r.lifelong else {
            if r.label.contains('/') {
                t.rows.push(vec![
                    r.label.clone(),
                    String::new(),
                    r.seed.to_string(),
                    r.status.clone(),
                    String::new(),
                    String::new(),
                    String::new(),
                    String::new(),
                ]);
            }
            continue;
        };
        let matrix = l
            .matrix
            .iter()
            .map(|row| row.iter().map(|v| g12(*v)).collect::<Vec<_>>().join(" "))
            .collect::<Vec<_>>()
            .join(" | ");
        t.rows.push(vec![
            r.label.clone(),
            l.method.clone(),
            r.seed.to_string(),
            r.status.clone(),
            l.matrix.len().to_string(),
            g12(l.avg_accuracy),
            opt(l.forgetting),
            matrix,
        ]);
        // Average accuracy over the tasks seen so far, after each task.
        for (i, row) in l.matrix.iter().enumerate() {
            let avg = row.iter().sum::<f64>() / row.len() as f64;
            t.points
                .push(((i + 1) as f64, avg, format!("{}/seed{}", l.method, r.seed)));
        }
    }
    t
}

pub fn build(records: &[RunRecord], kind: ReportKind) -> Table {
    match kind {
        ReportKind::AccuracyTable => accuracy_table(records),
        ReportKind::Heatmap => heatmap(records),
        ReportKind::SharpnessCurve => sharpness_curve(records),
        ReportKind::RobustnessCurve => robustness_curve(records),
        ReportKind::TradeoffScatter => tradeoff_scatter(records),
        ReportKind::LifelongTable => lifelong_table(records),
    }
}

/// Writes `<stem>.csv` and `<stem>.dat` under `out`; returns both paths.
pub fn write_table(table: &Table, out: &Path, stem: &str) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(out).map_err(|e| HarnessError::io(out, e))?;
    let csv_path = out.join(format!("{stem}.csv"));
    let dat_path = out.join(format!("{stem}.dat"));
    std::fs::write(&csv_path, table.to_csv()?).map_err(|e| HarnessError::io(&csv_path, e))?;
    std::fs::write(&dat_path, table.to_dat()).map_err(|e| HarnessError::io(&dat_path, e))?;
    Ok((csv_path, dat_path))
}

pub fn emit_report(records: &[RunRecord], kind: ReportKind, out: &Path) -> Result<(PathBuf, PathBuf)> {
    write_table(&build(records, kind), out, kind.as_str())
}

pub fn write_records(records: &[RunRecord], path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(records).map_err(|e| HarnessError::config(e.to_string()))?;
    std::fs::write(path, json + "\n").map_err(|e| HarnessError::io(path, e))
}

pub fn read_records(path: &Path) -> Result<Vec<RunRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| HarnessError::Data {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}
