//! Accuracy under multiplicative Gaussian weight noise.
//!
//! Each trainable coordinate is multiplied by `δ ~ N(1, σ²)`. Normalization
//! running statistics are never noised; they are recomputed on the refresh
//! dataset after every draw.

use alloc::vec::Vec;

use rand_distr::{Distribution, StandardNormal};

use crate::data::Dataset;
use crate::diffcore::LossGraph;
use crate::models::recompute_norm_statistics;
use crate::rng::{seeded, stream_id, Rng};
use crate::tensor::ParameterVector;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSpec {
    pub sigmas: Vec<f64>,
    pub trials: usize,
    pub seed: u64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec {
            sigmas: alloc::vec![0.0, 0.05, 0.1, 0.15, 0.2],
            trials: 10,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RobustnessRow {
    pub sigma: f64,
    pub trials: usize,
    pub acc_mean: f64,
    /// Population standard deviation over trials (0 for a single trial).
    pub acc_std: f64,
}

/// `φ ⊙ δ` with `δ_j = 1 + σ·z_j`, `z_j ~ N(0, 1)`. With `σ = 0` the input is
/// returned unchanged and no draws are consumed.
pub fn inject_weight_noise(params: &ParameterVector, sigma: f64, rng: &mut Rng) -> ParameterVector {
    let mut noisy = params.clone();
    if sigma == 0.0 {
        return noisy;
    }
    for v in noisy.as_mut_slice() {
        let z: f64 = StandardNormal.sample(rng);
        *v *= 1.0 + sigma * z;
    }
    noisy
}

/// Correct predictions of `params` on `dataset`.
pub fn correct_count(graph: &LossGraph, params: &ParameterVector, dataset: &Dataset) -> Result<usize> {
    let preds = graph.predict(params, &dataset.full_batch())?;
    Ok(preds.iter().zip(dataset.labels()).filter(|(p, l)| p == l).count())
}

pub fn accuracy(graph: &LossGraph, params: &ParameterVector, dataset: &Dataset) -> Result<f64> {
    Ok(correct_count(graph, params, dataset)? as f64 / dataset.len() as f64)
}

/// Accuracy after refreshing normalization statistics on `refresh`.
pub fn clean_accuracy(graph: &LossGraph, params: &ParameterVector, eval: &Dataset, refresh: &Dataset) -> Result<f64> {
    let mut g = graph.clone();
    recompute_norm_statistics(&mut g, params, refresh)?;
    accuracy(&g, params, eval)
}

/// Mean and standard deviation of accuracy for each σ (sorted ascending).
///
/// Trial `t` at sorted σ-index `s` draws from stream `(s, t)` of `spec.seed`,
/// so trials are independent of evaluation order.
pub fn robustness_curve(
    graph: &LossGraph,
    params: &ParameterVector,
    eval: &Dataset,
    refresh: &Dataset,
    spec: &NoiseSpec,
) -> Result<Vec<RobustnessRow>> {
    if eval.is_empty() || refresh.is_empty() {
        return Err(Error::config("robustness needs non-empty datasets"));
    }
    if spec.trials == 0 {
        return Err(Error::config("robustness needs at least one trial"));
    }
    if spec.sigmas.iter().any(|s| !s.is_finite() || *s < 0.0) {
        return Err(Error::config("noise levels must be finite and >= 0"));
    }
    let mut sigmas = spec.sigmas.clone();
    sigmas.sort_by(|a, b| a.total_cmp(b));
    let n = eval.len() as f64;
    let mut rows = Vec::with_capacity(sigmas.len());
    for (si, &sigma) in sigmas.iter().enumerate() {
        let mut counts = Vec::with_capacity(spec.trials);
        for trial in 0..spec.trials {
            let mut rng = seeded(spec.seed, stream_id(si, trial));
            let noisy = inject_weight_noise(params, sigma, &mut rng);
            let mut g = graph.clone();
            recompute_norm_statistics(&mut g, &noisy, refresh)?;
            counts.push(correct_count(&g, &noisy, eval)? as f64);
        }
        let total: f64 = counts.iter().sum();
        let t = spec.trials as f64;
        let acc_mean = total / (t * n);
        let var = counts
            .iter()
            .map(|c| {
                let d = c / n - acc_mean;
                d * d
            })
            .sum::<f64>()
            / t;
        rows.push(RobustnessRow {
            sigma,
            trials: spec.trials,
            acc_mean,
            acc_std: if spec.trials == 1 { 0.0 } else { libm::sqrt(var) },
        });
    }
    Ok(rows)
}
