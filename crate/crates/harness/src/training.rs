//! Seeded training runs and their records.

use std::time::Instant;

use lookbehind_core::data::{batch_iterator, split_tasks, Dataset};
use lookbehind_core::diffcore::LossGraph;
use lookbehind_core::lifelong::{run_lifelong, LifelongConfig};
use lookbehind_core::models::{
    build_model, recompute_norm_statistics, AnalyticInit, AnalyticLandscape, ConvSpec, MlpSpec, ModelSpec,
};
use lookbehind_core::optimizers::{outer_step, OptimizerConfig, OptimizerState};
use lookbehind_core::robustness::{accuracy, robustness_curve, NoiseSpec};
use lookbehind_core::sharpness::{loss_sharpness_tradeoff, m_sharpness, SharpnessSpec, TRADEOFF_RADIUS};
use lookbehind_core::tensor::ParameterVector;
use lookbehind_core::Error as CoreError;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, ModelConfig, OptimizerSection};
use crate::error::{HarnessError, Result};
use crate::io::{load_full, load_splits, Splits};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    /// 0 is the evaluation before training; epoch `e` is after `e` epochs.
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_accuracy: Option<f64>,
    pub test_accuracy: Option<f64>,
    pub heldout_accuracy: Option<f64>,
    pub outer_steps: u64,
    pub gradient_evals: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeoffPoint {
    pub radius: f64,
    pub loss: f64,
    pub sharpness: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseRow {
    pub sigma: f64,
    pub trials: usize,
    pub acc_mean: f64,
    pub acc_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LifelongRecord {
    pub method: String,
    /// `matrix[t][τ]` for `τ ≤ t`.
    pub matrix: Vec<Vec<f64>>,
    pub avg_accuracy: f64,
    pub forgetting: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub label: String,
    pub config_hash: String,
    pub seed: u64,
    /// Grid coordinates `(key, value)`; empty outside grids.
    pub cell: Vec<(String, String)>,
    pub optimizer: OptimizerSection,
    /// `ok`, or the reason the run stopped.
    pub status: String,
    pub epochs: Vec<EpochMetrics>,
    /// Final parameters of analytic landscapes.
    pub position: Option<Vec<f64>>,
    /// `sharp` or `flat` on the sharp/flat landscape.
    pub basin: Option<String>,
    pub sharpness: Option<Vec<(f64, f64)>>,
    pub tradeoff: Option<TradeoffPoint>,
    pub robustness: Option<Vec<NoiseRow>>,
    pub lifelong: Option<LifelongRecord>,
    pub wall_clock_ms: u64,
}

impl RunRecord {
    fn new(config: &ExperimentConfig, seed: u64) -> Self {
        RunRecord {
            label: config.name.clone(),
            config_hash: config.hash(),
            seed,
            cell: Vec::new(),
            optimizer: config.optimizer.clone(),
            status: "ok".into(),
            epochs: Vec::new(),
            position: None,
            basin: None,
            sharpness: None,
            tradeoff: None,
            robustness: None,
            lifelong: None,
            wall_clock_ms: 0,
        }
    }

    /// Record for a run that could not start.
    pub fn failed(config: &ExperimentConfig, seed: u64, reason: String) -> Self {
        RunRecord {
            status: reason,
            ..RunRecord::new(config, seed)
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }

    pub fn last(&self) -> Option<&EpochMetrics> {
        self.epochs.last()
    }
}

/// Core model description for `config` on the given training data.
pub fn model_spec(config: &ModelConfig, train: &Dataset) -> Result<ModelSpec> {
    let init = |point: Option<Vec<f64>>, low: f64, high: f64| match point {
        Some(p) => AnalyticInit::Point(p),
        None => AnalyticInit::Uniform { low, high },
    };
    Ok(match config {
        ModelConfig::Mlp {
            hidden,
            activation,
            normalization,
        } => {
            let mut widths = vec![train.features()];
            widths.extend_from_slice(hidden);
            widths.push(train.classes());
            ModelSpec::Mlp(MlpSpec {
                widths,
                activation: *activation,
                normalization: *normalization,
                heads: 1,
            })
        }
        ModelConfig::Conv {
            filters,
            kernel,
            activation,
            normalization,
        } => {
            let input = match train.feature_shape() {
                [c, h, w] => [*c, *h, *w],
                [f] => [1, 1, *f],
                other => {
                    return Err(HarnessError::config(format!(
                        "conv needs image inputs, got shape {other:?}"
                    )))
                }
            };
            ModelSpec::SmallConv(ConvSpec {
                input,
                filters: *filters,
                kernel: *kernel,
                activation: *activation,
                normalization: *normalization,
                classes: train.classes(),
            })
        }
        ModelConfig::Quadratic {
            dim,
            matrix,
            point,
            init_low,
            init_high,
        } => {
            let landscape = match matrix {
                Some(m) => AnalyticLandscape::Quadratic {
                    dim: *dim,
                    matrix: m.clone(),
                },
                None => AnalyticLandscape::identity_quadratic(*dim),
            };
            if point.as_ref().is_some_and(|p| p.len() != *dim) {
                return Err(HarnessError::config("model.point must have `dim` entries"));
            }
            ModelSpec::Analytic {
                landscape,
                init: init(point.clone(), *init_low, *init_high),
            }
        }
        ModelConfig::SharpFlat {
            point,
            init_low,
            init_high,
        } => ModelSpec::Analytic {
            landscape: AnalyticLandscape::SharpFlat,
            init: init(point.map(|p| vec![p]), *init_low, *init_high),
        },
    })
}

fn evaluate(
    graph: &LossGraph,
    params: &ParameterVector,
    splits: &Splits,
    epoch: usize,
    lr: f64,
    state: &OptimizerState,
) -> Result<EpochMetrics> {
    let train_loss = graph.evaluate(params, &splits.train.full_batch())?;
    let classify = !graph.model().is_analytic();
    let acc = |d: &Option<Dataset>| -> Result<Option<f64>> {
        match d {
            Some(d) if classify => Ok(Some(accuracy(graph, params, d)?)),
            _ => Ok(None),
        }
    };
    Ok(EpochMetrics {
        epoch,
        lr,
        train_loss,
        train_accuracy: if classify {
            Some(accuracy(graph, params, &splits.train)?)
        } else {
            None
        },
        test_accuracy: acc(&splits.test)?,
        heldout_accuracy: acc(&splits.heldout)?,
        outer_steps: state.outer_steps,
        gradient_evals: state.gradient_evals,
    })
}

/// Outcome of one epoch loop: `Err` only for configuration problems; numeric
/// failures are written into the record's status.
fn train_loop(
    config: &ExperimentConfig,
    seed: u64,
    switch: Option<(usize, OptimizerConfig)>,
    record: &mut RunRecord,
) -> Result<(LossGraph, ParameterVector, Splits)> {
    let splits = load_splits(&config.data)?;
    let spec = model_spec(&config.model, &splits.train)?;
    let (mut graph, params) = build_model(&spec, seed)?;
    let first = config.optimizer.to_core();
    let mut state = OptimizerState::new(params);
    recompute_norm_statistics(&mut graph, &state.slow, &splits.train)?;
    record
        .epochs
        .push(evaluate(&graph, &state.slow, &splits, 0, first.lr, &state)?);

    for epoch in 0..config.epochs {
        let mut opt = match &switch {
            Some((at, second)) if epoch >= *at => second.clone(),
            _ => first.clone(),
        };
        if matches!(&switch, Some((at, _)) if epoch == *at) {
            // Wrapper state restarts at the slow weights; momentum carries over.
            state.resync();
        }
        opt.lr = config.schedule.lr_at(opt.lr, epoch);
        let batches: Vec<_> =
            batch_iterator(&splits.train, config.batch_size, Some(seed), epoch as u64, false)?.collect();
        let per_step = opt.batches_per_step();
        for chunk in batches.chunks(per_step) {
            if chunk.len() < per_step {
                break;
            }
            match outer_step(&mut state, &graph, &mut chunk.iter(), &opt) {
                Ok(()) if state.slow.is_finite() => {}
                Ok(()) => {
                    record.status = format!("numeric failure in epoch {}: non-finite parameters", epoch + 1);
                    return Ok((graph, state.slow, splits));
                }
                Err(CoreError::Numeric { op }) => {
                    record.status = format!("numeric failure in epoch {}: non-finite {op}", epoch + 1);
                    return Ok((graph, state.slow, splits));
                }
                Err(e) => return Err(e.into()),
            }
        }
        recompute_norm_statistics(&mut graph, &state.slow, &splits.train)?;
        match evaluate(&graph, &state.slow, &splits, epoch + 1, opt.lr, &state) {
            Ok(m) if m.train_loss.is_finite() => record.epochs.push(m),
            Ok(_) | Err(HarnessError::Numeric(_)) => {
                record.status = format!("numeric failure in epoch {}: non-finite loss", epoch + 1);
                return Ok((graph, state.slow, splits));
            }
            Err(e) => return Err(e),
        }
    }
    Ok((graph, state.slow, splits))
}

fn finish(
    config: &ExperimentConfig,
    graph: &LossGraph,
    params: &ParameterVector,
    splits: &Splits,
    record: &mut RunRecord,
) -> Result<()> {
    if graph.model().is_analytic() {
        record.position = Some(params.as_slice().to_vec());
        if matches!(config.model, ModelConfig::SharpFlat { .. }) {
            record.basin = Some(AnalyticLandscape::basin_of(params.as_slice()[0]).as_str().into());
        }
    }
    if !record.is_ok() {
        return Ok(());
    }
    if let Some(s) = &config.sharpness {
        let geometry = s.geometry.unwrap_or(config.optimizer.geometry);
        let spec = SharpnessSpec {
            radii: s
                .radii
                .clone()
                .unwrap_or_else(|| SharpnessSpec::default_radii(geometry)),
            batch_size: s.batch_size,
            geometry,
            ascent_steps: s.ascent_steps,
        };
        record.sharpness = Some(m_sharpness(graph, params, &splits.train, &spec)?.values);
        let t = loss_sharpness_tradeoff(graph, params, &splits.train, geometry, TRADEOFF_RADIUS)?;
        record.tradeoff = Some(TradeoffPoint {
            radius: TRADEOFF_RADIUS,
            loss: t.loss,
            sharpness: t.sharpness,
        });
    }
    if let Some(r) = &config.robustness {
        let eval = splits
            .test
            .as_ref()
            .ok_or_else(|| HarnessError::config("robustness needs a test set"))?;
        let spec = NoiseSpec {
            sigmas: r.sigmas.clone(),
            trials: r.trials,
            seed: r.seed,
        };
        let rows = robustness_curve(graph, params, eval, &splits.train, &spec)?;
        record.robustness = Some(
            rows.into_iter()
                .map(|r| NoiseRow {
                    sigma: r.sigma,
                    trials: r.trials,
                    acc_mean: r.acc_mean,
                    acc_std: r.acc_std,
                })
                .collect(),
        );
    }
    Ok(())
}

fn run_with(config: &ExperimentConfig, seed: u64, switch: Option<(usize, OptimizerConfig)>) -> Result<RunRecord> {
    let start = Instant::now();
    let mut record = RunRecord::new(config, seed);
    let (graph, params, splits) = train_loop(config, seed, switch, &mut record)?;
    finish(config, &graph, &params, &splits, &mut record)?;
    record.wall_clock_ms = start.elapsed().as_millis() as u64;
    Ok(record)
}

/// Trains `config` with `seed`, then runs any sharpness or robustness
/// evaluation the config requests.
///
/// Lookahead consumes `k` minibatches per outer step; leftover batches at
/// the end of an epoch are dropped. A non-finite loss or parameter stops the
/// run and is reported in `status`.
pub fn run_training(config: &ExperimentConfig, seed: u64) -> Result<RunRecord> {
    run_with(config, seed, None)
}

/// Trains with `[optimizer]` for `⌊fraction · epochs⌋` epochs, then with the
/// switch target. Slow weights and momentum carry over.
pub fn run_switch_schedule(config: &ExperimentConfig, seed: u64) -> Result<RunRecord> {
    let switch = config
        .switch
        .as_ref()
        .ok_or_else(|| HarnessError::config("no [switch] section"))?;
    let target = config.switch_optimizer()?.expect("switch present");
    let at = (switch.fraction * config.epochs as f64).floor() as usize;
    let mut record = run_with(config, seed, Some((at, target.to_core())))?;
    record.cell.push(("switch.epoch".into(), at.to_string()));
    record
        .cell
        .push(("switch.to".into(), format!("{}/{}", target.variant, target.geometry)));
    Ok(record)
}

/// One record per method: the task stream is split from the full `[data]`
/// set and trained in order.
pub fn run_lifelong_config(config: &ExperimentConfig, seed: u64) -> Result<Vec<RunRecord>> {
    let section = config
        .lifelong
        .as_ref()
        .ok_or_else(|| HarnessError::config("no [lifelong] section"))?;
    let data = load_full(&config.data)?;
    let stream = split_tasks(&data, section.ways, section.test_fraction, seed)?;
    let core_config = LifelongConfig {
        optimizer: config.optimizer.to_core(),
        epochs: section.epochs,
        batch_size: section.batch_size,
        hidden: section.hidden.clone(),
        activation: section.activation,
        replay_capacity: section.replay_capacity,
        seed,
    };
    let mut records = Vec::new();
    for method in section.methods()? {
        let start = Instant::now();
        let mut record = RunRecord::new(config, seed);
        record.label = format!("{}/{method}", config.name);
        match run_lifelong(&stream, method, &core_config) {
            Ok(out) => {
                let n = out.matrix.tasks();
                let matrix = (0..n)
                    .map(|t| (0..=t).map(|tau| out.matrix.get(t, tau).unwrap_or(f64::NAN)).collect())
                    .collect();
                record.lifelong = Some(LifelongRecord {
                    method: method.to_string(),
                    matrix,
                    avg_accuracy: out.avg_accuracy,
                    forgetting: out.forgetting,
                });
            }
            Err(e @ CoreError::Numeric { .. }) => record.status = format!("numeric failure: {e}"),
            Err(e) => return Err(e.into()),
        }
        record.wall_clock_ms = start.elapsed().as_millis() as u64;
        records.push(record);
    }
    Ok(records)
}
