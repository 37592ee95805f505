//! SGD with momentum, SAM/ASAM, multistep ascent, Lookahead and Lookbehind.
//!
//! All variants share [`OptimizerState`] and the [`outer_step`] entry point.
//! Perturbations are normalized ascent directions of length `rho`:
//!
//! - SAM: `ε = ρ · g / ‖g‖₂`
//! - ASAM: `ε = ρ · φ²⊙g / ‖φ⊙g‖₂`, which satisfies `‖ε / |φ|‖₂ = ρ`
//!
//! When the (scaled) gradient norm is below [`ZERO_GRAD_GUARD`] the
//! perturbation is zero.

use core::borrow::Borrow;

use crate::data::Batch;
use crate::diffcore::LossGraph;
use crate::tensor::ParameterVector;
use crate::{Error, Result};

pub const ZERO_GRAD_GUARD: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Geometry {
    Sam,
    Asam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Sgd,
    /// Single ascent step (plain SAM / ASAM).
    Base,
    Multistep,
    Lookahead,
    Lookbehind,
}

/// Step length of each ascent in the multistep variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AscentSchedule {
    /// Every ascent is re-normalized to length `rho`.
    Renorm,
    /// Every ascent has length `rho / k`.
    Fraction,
}

str_enum!(Geometry { Sam => "sam", Asam => "asam" });
str_enum!(Variant {
    Sgd => "sgd",
    Base => "base",
    Multistep => "multistep",
    Lookahead => "lookahead",
    Lookbehind => "lookbehind",
});
str_enum!(AscentSchedule { Renorm => "renorm", Fraction => "fraction" });

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerConfig {
    /// Fast-weight step size η.
    pub lr: f64,
    /// Neighborhood size ρ.
    pub rho: f64,
    /// Inner steps k.
    pub k: usize,
    /// Slow-weight step size α.
    pub alpha: f64,
    pub momentum: f64,
    pub geometry: Geometry,
    pub variant: Variant,
    pub multistep_ascent: AscentSchedule,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 0.1,
            rho: 0.05,
            k: 5,
            alpha: 0.5,
            momentum: 0.9,
            geometry: Geometry::Sam,
            variant: Variant::Base,
            multistep_ascent: AscentSchedule::Renorm,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        // η = 0 is accepted: it freezes training, which the lifelong harness relies on.
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::config("learning rate must be a finite value >= 0"));
        }
        if !self.rho.is_finite() || self.rho < 0.0 {
            return Err(Error::config("rho must be a finite value >= 0"));
        }
        if self.k < 1 {
            return Err(Error::config("k must be at least 1"));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::config("alpha must lie in (0, 1]"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Minibatches consumed by one outer step.
    pub fn batches_per_step(&self) -> usize {
        match self.variant {
            Variant::Lookahead => self.k,
            _ => 1,
        }
    }

    /// Gradient evaluations spent by one outer step.
    pub fn gradients_per_step(&self) -> u64 {
        let k = self.k as u64;
        match self.variant {
            Variant::Sgd => 1,
            Variant::Base => 2,
            Variant::Multistep => k + 1,
            Variant::Lookahead | Variant::Lookbehind => 2 * k,
        }
    }
}

/// Slow, fast and perturbed weights plus the momentum buffer.
///
/// Between outer steps `fast == perturbed == slow`.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub slow: ParameterVector,
    pub fast: ParameterVector,
    pub perturbed: ParameterVector,
    pub momentum: ParameterVector,
    /// Inner step reached in the current outer step, in `[0, k]`.
    pub inner_step: usize,
    pub outer_steps: u64,
    pub gradient_evals: u64,
}

impl OptimizerState {
    pub fn new(params: ParameterVector) -> Self {
        OptimizerState {
            momentum: params.zeros_like(),
            fast: params.clone(),
            perturbed: params.clone(),
            slow: params,
            inner_step: 0,
            outer_steps: 0,
            gradient_evals: 0,
        }
    }

    pub fn params(&self) -> &ParameterVector {
        &self.slow
    }

    /// Resynchronizes fast and perturbed weights with the slow weights,
    /// keeping the momentum buffer.
    pub fn resync(&mut self) {
        self.fast = self.slow.clone();
        self.perturbed = self.slow.clone();
        self.inner_step = 0;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation {
    pub epsilon: ParameterVector,
}

/// `ε = ρ · g / ‖g‖₂`
pub fn sam_perturbation(grad: &ParameterVector, rho: f64) -> Perturbation {
    let mut epsilon = grad.zeros_like();
    let norm = grad.norm();
    if rho > 0.0 && norm >= ZERO_GRAD_GUARD {
        let scale = rho / norm;
        for (e, g) in epsilon.as_mut_slice().iter_mut().zip(grad.as_slice()) {
            *e = scale * g;
        }
    }
    Perturbation { epsilon }
}

/// `ε_j = ρ · φ_j² g_j / ‖φ⊙g‖₂`
pub fn asam_perturbation(params: &ParameterVector, grad: &ParameterVector, rho: f64) -> Perturbation {
    let mut epsilon = grad.zeros_like();
    let scaled_norm = libm::sqrt(
        params
            .as_slice()
            .iter()
            .zip(grad.as_slice())
            .map(|(p, g)| (p * g) * (p * g))
            .sum(),
    );
    if rho > 0.0 && scaled_norm >= ZERO_GRAD_GUARD {
        let scale = rho / scaled_norm;
        for ((e, p), g) in epsilon
            .as_mut_slice()
            .iter_mut()
            .zip(params.as_slice())
            .zip(grad.as_slice())
        {
            *e = scale * (p * p * g);
        }
    }
    Perturbation { epsilon }
}

pub fn perturbation(geometry: Geometry, params: &ParameterVector, grad: &ParameterVector, rho: f64) -> Perturbation {
    match geometry {
        Geometry::Sam => sam_perturbation(grad, rho),
        Geometry::Asam => asam_perturbation(params, grad, rho),
    }
}

/// `buf ← μ·buf + g; φ ← φ − η·buf`
pub fn sgd_step(state: &mut OptimizerState, grad: &ParameterVector, config: &OptimizerConfig) {
    let mu = config.momentum;
    for (b, g) in state.momentum.as_mut_slice().iter_mut().zip(grad.as_slice()) {
        *b = mu * *b + g;
    }
    state.slow.axpy(-config.lr, &state.momentum);
    state.resync();
}

/// Gradient at `point + ε(point)`, with the perturbation taken in `geometry`.
fn ascent_gradient(
    graph: &LossGraph,
    point: &ParameterVector,
    batch: &Batch,
    config: &OptimizerConfig,
    state: &mut OptimizerState,
) -> Result<(ParameterVector, ParameterVector)> {
    let g = graph.gradient(point, batch)?;
    let eps = perturbation(config.geometry, point, &g, config.rho);
    let perturbed = point.add(&eps.epsilon);
    let g2 = graph.gradient(&perturbed, batch)?;
    state.gradient_evals += 2;
    Ok((perturbed, g2))
}

/// One SAM/ASAM update: descend from φ with the gradient at φ + ε(φ),
/// through the momentum pipeline of [`sgd_step`].
pub fn base_step(state: &mut OptimizerState, graph: &LossGraph, batch: &Batch, config: &OptimizerConfig) -> Result<()> {
    let slow = state.slow.clone();
    let (_, g2) = ascent_gradient(graph, &slow, batch, config, state)?;
    sgd_step(state, &g2, config);
    state.outer_steps += 1;
    Ok(())
}

/// `k` chained ascents from φ, then one descent from φ using the gradient at
/// the end of the chain.
pub fn multistep_step(
    state: &mut OptimizerState,
    graph: &LossGraph,
    batch: &Batch,
    config: &OptimizerConfig,
) -> Result<()> {
    let radius = match config.multistep_ascent {
        AscentSchedule::Renorm => config.rho,
        AscentSchedule::Fraction => config.rho / config.k as f64,
    };
    let mut point = state.slow.clone();
    for i in 0..config.k {
        let g = graph.gradient(&point, batch)?;
        let eps = perturbation(config.geometry, &point, &g, radius);
        point = point.add(&eps.epsilon);
        state.perturbed = point.clone();
        state.inner_step = i + 1;
    }
    let g = graph.gradient(&point, batch)?;
    state.gradient_evals += config.k as u64 + 1;
    sgd_step(state, &g, config);
    state.outer_steps += 1;
    Ok(())
}

/// Slow-weight update shared by the wrappers.
///
/// The displacement `slow − fast` goes through the momentum buffer:
/// `buf ← μ·buf + (slow − fast); slow ← slow − α·buf`. With μ = 0 this is
/// exactly `slow + α(fast − slow)`.
fn interpolate(state: &mut OptimizerState, config: &OptimizerConfig) {
    let mu = config.momentum;
    for ((b, s), f) in state
        .momentum
        .as_mut_slice()
        .iter_mut()
        .zip(state.slow.as_slice())
        .zip(state.fast.as_slice())
    {
        *b = mu * *b + (s - f);
    }
    state.slow.axpy(-config.alpha, &state.momentum);
    state.resync();
    state.outer_steps += 1;
}

/// Lookahead around single-step SAM/ASAM; draws a fresh minibatch for each
/// of the `k` inner steps.
pub fn lookahead_outer_step<B: Borrow<Batch>>(
    state: &mut OptimizerState,
    graph: &LossGraph,
    batches: &mut dyn Iterator<Item = B>,
    config: &OptimizerConfig,
) -> Result<()> {
    state.resync();
    for i in 0..config.k {
        let batch = batches.next().ok_or(Error::StreamExhausted {
            needed: config.k,
            got: i,
        })?;
        let fast = state.fast.clone();
        let (_, g2) = ascent_gradient(graph, &fast, batch.borrow(), config, state)?;
        state.fast.axpy(-config.lr, &g2);
        state.inner_step = i + 1;
    }
    interpolate(state, config);
    Ok(())
}

/// Lookbehind on one minibatch: the perturbed weights climb a chain of `k`
/// ascents, each ascent's gradient is applied as a descent to the fast
/// weights, then the slow weights interpolate towards the fast ones.
pub fn lookbehind_outer_step(
    state: &mut OptimizerState,
    graph: &LossGraph,
    batch: &Batch,
    config: &OptimizerConfig,
) -> Result<()> {
    state.resync();
    for i in 0..config.k {
        let g = graph.gradient(&state.perturbed, batch)?;
        let eps = perturbation(config.geometry, &state.perturbed, &g, config.rho);
        state.perturbed.axpy(1.0, &eps.epsilon);
        let g2 = graph.gradient(&state.perturbed, batch)?;
        state.fast.axpy(-config.lr, &g2);
        state.gradient_evals += 2;
        state.inner_step = i + 1;
    }
    interpolate(state, config);
    Ok(())
}

/// One outer step of the configured variant, pulling as many minibatches as
/// it needs from `batches` (k for Lookahead, one otherwise).
pub fn outer_step<B: Borrow<Batch>>(
    state: &mut OptimizerState,
    graph: &LossGraph,
    batches: &mut dyn Iterator<Item = B>,
    config: &OptimizerConfig,
) -> Result<()> {
    if config.variant == Variant::Lookahead {
        return lookahead_outer_step(state, graph, batches, config);
    }
    let batch = batches.next().ok_or(Error::StreamExhausted { needed: 1, got: 0 })?;
    let batch = batch.borrow();
    match config.variant {
        Variant::Sgd => {
            let g = graph.gradient(&state.slow, batch)?;
            state.gradient_evals += 1;
            sgd_step(state, &g, config);
            state.outer_steps += 1;
            Ok(())
        }
        Variant::Base => base_step(state, graph, batch, config),
        Variant::Multistep => multistep_step(state, graph, batch, config),
        Variant::Lookbehind => lookbehind_outer_step(state, graph, batch, config),
        Variant::Lookahead => unreachable!(),
    }
}
