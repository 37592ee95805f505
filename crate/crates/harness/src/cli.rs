//! The `lookbehind` command line.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result};
use crate::grid::run_grid;
use crate::report::{best_table, emit_report, epochs_table, read_records, write_records, write_table, ReportKind};
use crate::training::{run_lifelong_config, run_switch_schedule, run_training, RunRecord};

#[derive(Debug, Parser)]
#[command(name = "lookbehind", version, about = "Sharpness-aware optimizer experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train every seed of a config.
    Train(RunArgs),
    /// Train every cell of the `[grid]` axes with every seed.
    Grid(RunArgs),
    /// Train, then measure m-sharpness and the loss/sharpness trade-off.
    Sharpness(RunArgs),
    /// Train, then evaluate accuracy under multiplicative weight noise.
    Robustness(RunArgs),
    /// Run the `[lifelong]` methods on a split-task stream.
    Lifelong(RunArgs),
    /// Train with `[optimizer]`, then switch to `[switch.optimizer]`.
    Switch(RunArgs),
    /// Rebuild a report from a records.json file.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Run only this seed instead of the config's seed list.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Dotted `key=value` applied on top of the config file.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// A records.json written by another subcommand.
    #[arg(long)]
    pub records: PathBuf,
    /// accuracy-table, heatmap, sharpness-curve, robustness-curve,
    /// tradeoff-scatter or lifelong-table.
    #[arg(long)]
    pub kind: ReportKind,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

/// What a command produced.
#[derive(Debug, Default)]
pub struct Outcome {
    pub written: Vec<PathBuf>,
    /// Status lines of runs that stopped on a numeric failure.
    pub failures: Vec<String>,
}

fn load(args: &RunArgs) -> Result<ExperimentConfig> {
    let mut config = ExperimentConfig::load(&args.config, &args.overrides)?;
    if let Some(seed) = args.seed {
        config.seeds = vec![seed];
    }
    Ok(config)
}

fn ensure_section(config: ExperimentConfig, key: &str, present: bool) -> Result<ExperimentConfig> {
    if present {
        return Ok(config);
    }
    config.with_value(key, toml::Value::Table(toml::Table::new()))
}

fn per_seed(config: &ExperimentConfig, run: fn(&ExperimentConfig, u64) -> Result<RunRecord>) -> Result<Vec<RunRecord>> {
    config.seeds.par_iter().map(|&s| run(config, s)).collect()
}

fn write_outputs(records: &[RunRecord], out: &Path, kinds: &[ReportKind], outcome: &mut Outcome) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| HarnessError::io(out, e))?;
    let json = out.join("records.json");
    write_records(records, &json)?;
    outcome.written.push(json);
    if kinds != [ReportKind::LifelongTable] {
        let (c, d) = write_table(&epochs_table(records), out, "epochs")?;
        outcome.written.extend([c, d]);
    }
    for &kind in kinds {
        let (c, d) = emit_report(records, kind, out)?;
        outcome.written.extend([c, d]);
    }
    outcome.failures = records
        .iter()
        .filter(|r| !r.is_ok())
        .map(|r| format!("{} seed {}: {}", r.label, r.seed, r.status))
        .collect();
    Ok(())
}

fn training_kinds(records: &[RunRecord]) -> Vec<ReportKind> {
    let mut kinds = vec![ReportKind::AccuracyTable];
    if records.iter().any(|r| r.sharpness.is_some()) {
        kinds.extend([ReportKind::SharpnessCurve, ReportKind::TradeoffScatter]);
    }
    if records.iter().any(|r| r.robustness.is_some()) {
        kinds.push(ReportKind::RobustnessCurve);
    }
    kinds
}

pub fn run(cli: Cli) -> Result<Outcome> {
    let mut outcome = Outcome::default();
    match cli.command {
        Command::Train(args) => {
            let config = load(&args)?;
            let records = per_seed(&config, run_training)?;
            write_outputs(&records, &args.out, &training_kinds(&records), &mut outcome)?;
        }
        Command::Switch(args) => {
            let config = load(&args)?;
            if config.switch.is_none() {
                return Err(HarnessError::config("`switch` needs a [switch] section"));
            }
            let records = per_seed(&config, run_switch_schedule)?;
            write_outputs(&records, &args.out, &training_kinds(&records), &mut outcome)?;
        }
        Command::Sharpness(args) => {
            let config = load(&args)?;
            let present = config.sharpness.is_some();
            let config = ensure_section(config, "sharpness", present)?;
            let records = per_seed(&config, run_training)?;
            write_outputs(&records, &args.out, &training_kinds(&records), &mut outcome)?;
        }
        Command::Robustness(args) => {
            let config = load(&args)?;
            let present = config.robustness.is_some();
            let config = ensure_section(config, "robustness", present)?;
            let records = per_seed(&config, run_training)?;
            write_outputs(&records, &args.out, &training_kinds(&records), &mut outcome)?;
        }
        Command::Grid(args) => {
            let config = load(&args)?;
            let records = run_grid(&config)?;
            let mut kinds = training_kinds(&records);
            kinds.push(ReportKind::Heatmap);
            write_outputs(&records, &args.out, &kinds, &mut outcome)?;
            let best = best_table(&records);
            let path = args.out.join("best.csv");
            std::fs::write(&path, best.to_csv()?).map_err(|e| HarnessError::io(&path, e))?;
            outcome.written.push(path);
        }
        Command::Lifelong(args) => {
            let config = load(&args)?;
            if config.lifelong.is_none() {
                return Err(HarnessError::config("`lifelong` needs a [lifelong] section"));
            }
            let nested: Vec<Vec<RunRecord>> = config
                .seeds
                .par_iter()
                .map(|&s| run_lifelong_config(&config, s))
                .collect::<Result<_>>()?;
            let records: Vec<RunRecord> = nested.into_iter().flatten().collect();
            write_outputs(&records, &args.out, &[ReportKind::LifelongTable], &mut outcome)?;
        }
        Command::Report(args) => {
            let records = read_records(&args.records)?;
            let (c, d) = emit_report(&records, args.kind, &args.out)?;
            outcome.written.extend([c, d]);
        }
    }
    Ok(outcome)
}
