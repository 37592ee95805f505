//! Task-sequential training with multi-head outputs, experience replay and
//! the two C-MAML meta-learners.
//!
//! Accuracy matrices are indexed from zero: `a(t, τ)` is stored at row
//! `t − 1`, column `τ − 1`. The metric functions take `t`, the number of tasks
//! trained so far.

use alloc::collections::VecDeque;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::seq::index;

use crate::data::{batch_iterator, Batch, Task, TaskStream};
use crate::diffcore::{LossGraph, LossKind};
use crate::models::{Activation, MlpSpec, Model, ModelSpec, Normalization};
use crate::optimizers::{outer_step, perturbation, Geometry, OptimizerConfig, OptimizerState, Variant};
use crate::rng::{seeded, Rng};
use crate::robustness::accuracy;
use crate::tensor::{ParameterVector, Tensor};
use crate::{Error, Result};

pub const DEFAULT_REPLAY_CAPACITY: usize = 65;

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayItem {
    pub input: Vec<f64>,
    pub label: usize,
    pub task: usize,
}

/// One ring per task; the oldest item of a full ring is evicted on push.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBuffer {
    capacity: usize,
    rings: Vec<(usize, VecDeque<ReplayItem>)>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        ReplayBuffer {
            capacity,
            rings: Vec::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.rings.iter().map(|(_, r)| r.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn push(&mut self, item: ReplayItem) {
        if self.capacity == 0 {
            return;
        }
        let pos = match self.rings.iter().position(|(t, _)| *t == item.task) {
            Some(p) => p,
            None => {
                self.rings.push((item.task, VecDeque::with_capacity(self.capacity)));
                self.rings.len() - 1
            }
        };
        let ring = &mut self.rings[pos].1;
        if ring.len() == self.capacity {
            ring.pop_front();
        }
        ring.push_back(item);
    }

    /// Pushes every row of `batch`.
    pub fn push_batch(&mut self, batch: &Batch) {
        for i in 0..batch.len() {
            self.push(item_of(batch, i));
        }
    }

    /// Items in task-insertion order, oldest first within each task.
    pub fn items(&self) -> impl Iterator<Item = &ReplayItem> {
        self.rings.iter().flat_map(|(_, r)| r.iter())
    }

    /// `count` items drawn uniformly without replacement over the whole
    /// buffer, or every item if fewer are stored.
    pub fn sample(&self, count: usize, rng: &mut Rng) -> Vec<ReplayItem> {
        let all: Vec<&ReplayItem> = self.items().collect();
        if count >= all.len() {
            return all.into_iter().cloned().collect();
        }
        index::sample(rng, all.len(), count)
            .into_iter()
            .map(|i| all[i].clone())
            .collect()
    }
}

fn item_of(batch: &Batch, i: usize) -> ReplayItem {
    let f = batch.features();
    ReplayItem {
        input: batch.inputs().data()[i * f..(i + 1) * f].to_vec(),
        label: batch.labels()[i],
        task: batch.tasks()[i],
    }
}

/// Row `i` of `batch` as a batch of one.
pub fn example(batch: &Batch, i: usize) -> Batch {
    batch_of(&[item_of(batch, i)], batch.features()).expect("row of a valid batch")
}

fn batch_of(items: &[ReplayItem], features: usize) -> Result<Batch> {
    let mut data = Vec::with_capacity(items.len() * features);
    for it in items {
        if it.input.len() != features {
            return Err(Error::config("replay item width differs from the batch"));
        }
        data.extend_from_slice(&it.input);
    }
    Batch::new(
        Tensor::new(alloc::vec![items.len(), features], data)?,
        items.iter().map(|it| it.label).collect(),
        items.iter().map(|it| it.task).collect(),
    )
}

/// `Sample(R) ∪ b`, with `|b|` items drawn from the buffer.
pub fn replay_batch(batch: &Batch, buffer: &ReplayBuffer, rng: &mut Rng) -> Result<Batch> {
    let sampled = buffer.sample(batch.len(), rng);
    if sampled.is_empty() {
        return Ok(batch.clone());
    }
    batch.concat(&batch_of(&sampled, batch.features())?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyMatrix {
    tasks: usize,
    cells: Vec<Option<f64>>,
}

impl AccuracyMatrix {
    pub fn new(tasks: usize) -> Self {
        AccuracyMatrix {
            tasks,
            cells: alloc::vec![None; tasks * tasks],
        }
    }

    pub fn tasks(&self) -> usize {
        self.tasks
    }

    /// Stores the accuracy on task `eval` after training task `trained`.
    pub fn set(&mut self, trained: usize, eval: usize, value: f64) -> Result<()> {
        if eval > trained || trained >= self.tasks {
            return Err(Error::Evaluation(alloc::format!(
                "cell ({trained}, {eval}) is outside the lower triangle of {} tasks",
                self.tasks
            )));
        }
        if !(0.0..=1.0).contains(&value) {
            return Err(Error::Evaluation(alloc::format!("accuracy {value} outside [0, 1]")));
        }
        self.cells[trained * self.tasks + eval] = Some(value);
        Ok(())
    }

    pub fn get(&self, trained: usize, eval: usize) -> Option<f64> {
        if trained >= self.tasks || eval >= self.tasks {
            return None;
        }
        self.cells[trained * self.tasks + eval]
    }

    pub fn populated(&self) -> usize {
        self.cells.iter().filter(|c| c.is_some()).count()
    }

    fn cell(&self, trained: usize, eval: usize) -> Result<f64> {
        self.get(trained, eval).ok_or_else(|| {
            Error::Evaluation(alloc::format!(
                "accuracy after task {} on task {} is missing",
                trained + 1,
                eval + 1
            ))
        })
    }
}

fn check_rows(matrix: &AccuracyMatrix, t: usize) -> Result<()> {
    if t == 0 || t > matrix.tasks() {
        return Err(Error::Evaluation(alloc::format!(
            "t = {t} outside 1..={}",
            matrix.tasks()
        )));
    }
    Ok(())
}

/// `(1/t) Σ_{τ ≤ t} a(t, τ)`
pub fn average_accuracy(matrix: &AccuracyMatrix, t: usize) -> Result<f64> {
    check_rows(matrix, t)?;
    let mut sum = 0.0;
    for tau in 0..t {
        sum += matrix.cell(t - 1, tau)?;
    }
    Ok(sum / t as f64)
}

/// `(1/(t−1)) Σ_{τ < t} max_{t' < t} (a(t', τ) − a(t, τ))`; negative under
/// backward transfer. Undefined for `t = 1`.
pub fn forgetting(matrix: &AccuracyMatrix, t: usize) -> Result<f64> {
    check_rows(matrix, t)?;
    if t == 1 {
        return Err(Error::Evaluation(String::from(
            "forgetting is undefined after a single task",
        )));
    }
    let mut sum = 0.0;
    for tau in 0..t - 1 {
        let last = matrix.cell(t - 1, tau)?;
        let mut best = f64::NEG_INFINITY;
        for earlier in tau..t - 1 {
            best = best.max(matrix.cell(earlier, tau)? - last);
        }
        sum += best;
    }
    Ok(sum / (t - 1) as f64)
}

/// Step sizes for the C-MAML updates. The inner loop length is the size of
/// the minibatch handed to each step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetaConfig {
    pub lr: f64,
    pub rho: f64,
    pub alpha: f64,
    pub geometry: Geometry,
}

impl From<&OptimizerConfig> for MetaConfig {
    fn from(c: &OptimizerConfig) -> Self {
        MetaConfig {
            lr: c.lr,
            rho: c.rho,
            alpha: c.alpha,
            geometry: c.geometry,
        }
    }
}

/// Lookahead-C-MAML: single-example SGD over `batch`, pushing each example to
/// the buffer, then `φ₀ ← φ₀ − η ∇L(φ_k, b_m)` with `b_m = Sample(R) ∪ b`
/// drawn before the pushes. The meta gradient is first order.
pub fn c_maml_lookahead_step(
    params: &mut ParameterVector,
    graph: &LossGraph,
    batch: &Batch,
    buffer: &mut ReplayBuffer,
    config: &MetaConfig,
    rng: &mut Rng,
) -> Result<()> {
    if batch.is_empty() {
        return Ok(());
    }
    let meta_batch = replay_batch(batch, buffer, rng)?;
    let mut fast = params.clone();
    for i in 0..batch.len() {
        let ex = example(batch, i);
        buffer.push(item_of(batch, i));
        let g = graph.gradient(&fast, &ex)?;
        fast.axpy(-config.lr, &g);
    }
    let g = graph.gradient(&fast, &meta_batch)?;
    params.axpy(-config.lr, &g);
    Ok(())
}

/// Lookbehind-C-MAML: over the examples of `batch`, the perturbed chain
/// `φ'` climbs by `ε(φ')` while the fast weights descend with the gradient at
/// the climbed point; the fast weights are pulled back to
/// `φ₀ + α(φ_k − φ₀)`, and the meta step descends from `φ₀` with the
/// `b_m`-gradient at `φ_k + ε(φ_k)` (first order).
pub fn c_maml_lookbehind_step(
    params: &mut ParameterVector,
    graph: &LossGraph,
    batch: &Batch,
    buffer: &mut ReplayBuffer,
    config: &MetaConfig,
    rng: &mut Rng,
) -> Result<()> {
    if batch.is_empty() {
        return Ok(());
    }
    let meta_batch = replay_batch(batch, buffer, rng)?;
    let mut fast = params.clone();
    let mut climbed = params.clone();
    for i in 0..batch.len() {
        let ex = example(batch, i);
        buffer.push(item_of(batch, i));
        let g = graph.gradient(&climbed, &ex)?;
        let eps = perturbation(config.geometry, &climbed, &g, config.rho);
        climbed.axpy(1.0, &eps.epsilon);
        let g2 = graph.gradient(&climbed, &ex)?;
        fast.axpy(-config.lr, &g2);
    }
    let mut adapted = params.clone();
    adapted.axpy(config.alpha, &fast.sub(params));
    let g = graph.gradient(&adapted, &meta_batch)?;
    let eps = perturbation(config.geometry, &adapted, &g, config.rho);
    let g2 = graph.gradient(&adapted.add(&eps.epsilon), &meta_batch)?;
    params.axpy(-config.lr, &g2);
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LifelongMethod {
    /// One of the sequential optimizers, optionally with experience replay.
    Sequential {
        variant: Variant,
        replay: bool,
    },
    LookaheadCMaml,
    LookbehindCMaml,
}

impl LifelongMethod {
    pub fn replays(self) -> bool {
        match self {
            LifelongMethod::Sequential { replay, .. } => replay,
            _ => true,
        }
    }
}

impl fmt::Display for LifelongMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LifelongMethod::Sequential { variant, replay } => {
                if *replay {
                    f.write_str("er-")?;
                }
                f.write_str(match variant {
                    Variant::Sgd => "sgd",
                    Variant::Base => "sam",
                    Variant::Multistep => "multistep-sam",
                    Variant::Lookahead => "lookahead-sam",
                    Variant::Lookbehind => "lookbehind-sam",
                })
            }
            LifelongMethod::LookaheadCMaml => f.write_str("lookahead-c-maml"),
            LifelongMethod::LookbehindCMaml => f.write_str("lookbehind-c-maml"),
        }
    }
}

impl FromStr for LifelongMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lookahead-c-maml" => return Ok(LifelongMethod::LookaheadCMaml),
            "lookbehind-c-maml" => return Ok(LifelongMethod::LookbehindCMaml),
            _ => {}
        }
        let (replay, rest) = match s.strip_prefix("er-") {
            Some(rest) => (true, rest),
            None => (false, s),
        };
        let variant = match rest {
            "sgd" => Variant::Sgd,
            "sam" => Variant::Base,
            "multistep-sam" => Variant::Multistep,
            "lookbehind-sam" => Variant::Lookbehind,
            _ => return Err(Error::config(alloc::format!("unknown lifelong method `{s}`"))),
        };
        Ok(LifelongMethod::Sequential { variant, replay })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LifelongConfig {
    /// `lr`, `rho`, `alpha`, `geometry` drive every method; `k`, `momentum`
    /// and `multistep_ascent` only the sequential ones.
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub replay_capacity: usize,
    pub seed: u64,
}

impl Default for LifelongConfig {
    fn default() -> Self {
        LifelongConfig {
            optimizer: OptimizerConfig {
                momentum: 0.0,
                ..OptimizerConfig::default()
            },
            epochs: 10,
            batch_size: 10,
            hidden: alloc::vec![32],
            activation: Activation::Relu,
            replay_capacity: DEFAULT_REPLAY_CAPACITY,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LifelongOutcome {
    pub matrix: AccuracyMatrix,
    pub avg_accuracy: f64,
    /// `None` for single-task streams, where forgetting is undefined.
    pub forgetting: Option<f64>,
    pub params: ParameterVector,
}

/// Multi-head MLP with one head per task of `stream`.
pub fn lifelong_model(stream: &TaskStream, config: &LifelongConfig) -> Result<(LossGraph, ParameterVector)> {
    let first = stream
        .tasks
        .first()
        .ok_or_else(|| Error::config("lifelong stream has no tasks"))?;
    let mut widths = alloc::vec![first.train.features()];
    widths.extend_from_slice(&config.hidden);
    widths.push(stream.ways());
    let model = Model::new(ModelSpec::Mlp(MlpSpec {
        widths,
        activation: config.activation,
        normalization: Normalization::None,
        heads: stream.len(),
    }))?;
    let params = model.init_params(config.seed);
    Ok((LossGraph::new(model, LossKind::CrossEntropy)?, params))
}

/// Learner state carried from task to task.
#[derive(Debug, Clone)]
pub struct LifelongRun {
    pub graph: LossGraph,
    pub params: ParameterVector,
    pub buffer: ReplayBuffer,
    method: LifelongMethod,
    optimizer: OptimizerConfig,
    meta: MetaConfig,
    epochs: usize,
    batch_size: usize,
    seed: u64,
    rng: Rng,
}

impl LifelongRun {
    pub fn new(stream: &TaskStream, method: LifelongMethod, config: &LifelongConfig) -> Result<Self> {
        config.optimizer.validate()?;
        if config.batch_size == 0 {
            return Err(Error::config("batch size must be at least 1"));
        }
        let optimizer = match method {
            LifelongMethod::Sequential {
                variant: Variant::Lookahead,
                ..
            } => return Err(Error::config("lookahead is not a sequential lifelong method")),
            LifelongMethod::Sequential { variant, .. } => OptimizerConfig {
                variant,
                ..config.optimizer.clone()
            },
            _ => config.optimizer.clone(),
        };
        let (graph, params) = lifelong_model(stream, config)?;
        Ok(LifelongRun {
            graph,
            params,
            buffer: ReplayBuffer::new(config.replay_capacity),
            method,
            meta: MetaConfig::from(&config.optimizer),
            optimizer,
            epochs: config.epochs,
            batch_size: config.batch_size,
            seed: config.seed,
            rng: seeded(config.seed, u64::MAX - 1),
        })
    }

    /// `epochs` shuffled passes over the training set of task `t`.
    ///
    /// Sequential methods start every task with a fresh momentum buffer, so
    /// the heads of other tasks stay untouched when replay is off. Replay
    /// draws as many stored items as the current minibatch holds.
    pub fn train_task(&mut self, t: usize, task: &Task) -> Result<()> {
        let mut state = OptimizerState::new(self.params.clone());
        let shuffle = self.seed.wrapping_add(t as u64);
        for epoch in 0..self.epochs {
            for batch in batch_iterator(&task.train, self.batch_size, Some(shuffle), epoch as u64, false)? {
                match self.method {
                    LifelongMethod::Sequential { replay, .. } => {
                        let step_batch = if replay {
                            replay_batch(&batch, &self.buffer, &mut self.rng)?
                        } else {
                            batch.clone()
                        };
                        outer_step(
                            &mut state,
                            &self.graph,
                            &mut core::iter::once(&step_batch),
                            &self.optimizer,
                        )?;
                        if replay {
                            self.buffer.push_batch(&batch);
                        }
                    }
                    LifelongMethod::LookaheadCMaml => c_maml_lookahead_step(
                        &mut state.slow,
                        &self.graph,
                        &batch,
                        &mut self.buffer,
                        &self.meta,
                        &mut self.rng,
                    )?,
                    LifelongMethod::LookbehindCMaml => c_maml_lookbehind_step(
                        &mut state.slow,
                        &self.graph,
                        &batch,
                        &mut self.buffer,
                        &self.meta,
                        &mut self.rng,
                    )?,
                }
                if !state.slow.is_finite() {
                    return Err(Error::Numeric { op: "lifelong step" });
                }
            }
        }
        self.params = state.slow;
        Ok(())
    }
}

/// Trains the tasks of `stream` in order, filling the accuracy matrix with
/// test accuracies on every seen task after each one.
pub fn run_lifelong(stream: &TaskStream, method: LifelongMethod, config: &LifelongConfig) -> Result<LifelongOutcome> {
    let mut run = LifelongRun::new(stream, method, config)?;
    let mut matrix = AccuracyMatrix::new(stream.len());
    for (t, task) in stream.tasks.iter().enumerate() {
        run.train_task(t, task)?;
        for (tau, seen) in stream.tasks[..=t].iter().enumerate() {
            matrix.set(t, tau, accuracy(&run.graph, &run.params, &seen.test)?)?;
        }
    }
    let t = stream.len();
    let avg_accuracy = average_accuracy(&matrix, t)?;
    let forgetting = if t >= 2 { Some(forgetting(&matrix, t)?) } else { None };
    Ok(LifelongOutcome {
        matrix,
        avg_accuracy,
        forgetting,
        params: run.params,
    })
}
