//! Desk-scale models: MLPs (optionally multi-head), a one-block convolutional
//! net, and closed-form landscapes used as test oracles.

use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::data::{Batch, Dataset};
use crate::diffcore::{channel_statistics, LossGraph, LossKind, Tape, Var};
use crate::rng::seeded;
use crate::tensor::{Layout, ParameterVector};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Normalization {
    None,
    /// Per-channel normalization; batch statistics while training, running
    /// statistics (refreshed by [`recompute_norm_statistics`]) at inference.
    Batch,
}

str_enum!(Activation { Relu => "relu", Tanh => "tanh" });
str_enum!(Normalization { None => "none", Batch => "batch" });

#[derive(Debug, Clone, PartialEq)]
pub struct MlpSpec {
    /// Input width, hidden widths, then the output width of every head.
    pub widths: Vec<usize>,
    pub activation: Activation,
    pub normalization: Normalization,
    /// Number of output heads; rows pick their head from the batch task ids.
    pub heads: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvSpec {
    /// `[channels, height, width]` of each input.
    pub input: [usize; 3],
    pub filters: usize,
    pub kernel: usize,
    pub activation: Activation,
    pub normalization: Normalization,
    pub classes: usize,
}

/// Closed-form loss surfaces over the raw parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub enum AnalyticLandscape {
    /// `½ φᵀ A φ` with a row-major `dim x dim` matrix.
    Quadratic { dim: usize, matrix: Vec<f64> },
    /// One-dimensional polynomial with a narrow and a wide basin of equal depth.
    SharpFlat,
}

#[derive(Debug, Clone, PartialEq)]
pub enum AnalyticInit {
    Point(Vec<f64>),
    Uniform { low: f64, high: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelSpec {
    Mlp(MlpSpec),
    SmallConv(ConvSpec),
    Analytic {
        landscape: AnalyticLandscape,
        init: AnalyticInit,
    },
}

/// `(x² − 1)² · ((x − c)² + d)`: minima of value 0 at x = −1 and x = +1.
///
/// Curvature is `8((±1 − c)² + d)`, i.e. 72.8 at the sharp minimum and 8.8 at
/// the flat one.
pub const SHARP_FLAT_C: f64 = 2.0;
pub const SHARP_FLAT_D: f64 = 0.1;
pub const SHARP_MINIMUM: f64 = -1.0;
pub const FLAT_MINIMUM: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Basin {
    Sharp,
    Flat,
}

str_enum!(Basin { Sharp => "sharp", Flat => "flat" });

impl AnalyticLandscape {
    pub fn dim(&self) -> usize {
        match self {
            AnalyticLandscape::Quadratic { dim, .. } => *dim,
            AnalyticLandscape::SharpFlat => 1,
        }
    }

    pub fn identity_quadratic(dim: usize) -> Self {
        let mut matrix = vec![0.0; dim * dim];
        for i in 0..dim {
            matrix[i * dim + i] = 1.0;
        }
        AnalyticLandscape::Quadratic { dim, matrix }
    }

    fn validate(&self) -> Result<()> {
        if let AnalyticLandscape::Quadratic { dim, matrix } = self {
            if matrix.len() != dim * dim {
                return Err(Error::config("quadratic matrix must be dim x dim"));
            }
        }
        Ok(())
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        match self {
            AnalyticLandscape::Quadratic { dim, matrix } => {
                let mut total = 0.0;
                for i in 0..*dim {
                    let mut row = 0.0;
                    for j in 0..*dim {
                        row += matrix[i * dim + j] * x[j];
                    }
                    total += x[i] * row;
                }
                0.5 * total
            }
            AnalyticLandscape::SharpFlat => {
                let x = x[0];
                let u = x * x - 1.0;
                let v = (x - SHARP_FLAT_C) * (x - SHARP_FLAT_C) + SHARP_FLAT_D;
                u * u * v
            }
        }
    }

    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        match self {
            AnalyticLandscape::Quadratic { dim, matrix } => (0..*dim)
                .map(|i| {
                    let mut g = 0.0;
                    for j in 0..*dim {
                        g += 0.5 * (matrix[i * dim + j] + matrix[j * dim + i]) * x[j];
                    }
                    g
                })
                .collect(),
            AnalyticLandscape::SharpFlat => {
                let x = x[0];
                let u = x * x - 1.0;
                let v = (x - SHARP_FLAT_C) * (x - SHARP_FLAT_C) + SHARP_FLAT_D;
                vec![4.0 * x * u * v + 2.0 * (x - SHARP_FLAT_C) * u * u]
            }
        }
    }

    /// Location of the local maximum separating the two sharp/flat basins.
    pub fn sharp_flat_barrier() -> f64 {
        let land = AnalyticLandscape::SharpFlat;
        let (mut lo, mut hi) = (SHARP_MINIMUM + 1e-6, FLAT_MINIMUM - 1e-6);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if land.gradient(&[mid])[0] > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    pub fn basin_of(x: f64) -> Basin {
        if x < Self::sharp_flat_barrier() {
            Basin::Sharp
        } else {
            Basin::Flat
        }
    }
}

impl ModelSpec {
    /// Segmentation of the parameter vector; a pure function of the spec.
    pub fn layout(&self) -> Result<Layout> {
        let mut layout = Layout::new();
        match self {
            ModelSpec::Mlp(spec) => {
                if spec.widths.len() < 2 || spec.widths.contains(&0) {
                    return Err(Error::config("mlp needs at least two positive widths"));
                }
                if spec.heads == 0 {
                    return Err(Error::config("mlp needs at least one head"));
                }
                let last = spec.widths.len() - 1;
                for i in 0..last - 1 {
                    let (fan_in, fan_out) = (spec.widths[i], spec.widths[i + 1]);
                    layout.push(alloc::format!("hidden{i}.weight"), vec![fan_in, fan_out]);
                    layout.push(alloc::format!("hidden{i}.bias"), vec![fan_out]);
                    if spec.normalization == Normalization::Batch {
                        layout.push(alloc::format!("hidden{i}.norm.gamma"), vec![fan_out]);
                        layout.push(alloc::format!("hidden{i}.norm.beta"), vec![fan_out]);
                    }
                }
                for h in 0..spec.heads {
                    layout.push(
                        alloc::format!("head{h}.weight"),
                        vec![spec.widths[last - 1], spec.widths[last]],
                    );
                    layout.push(alloc::format!("head{h}.bias"), vec![spec.widths[last]]);
                }
            }
            ModelSpec::SmallConv(spec) => {
                let [c, h, w] = spec.input;
                if c == 0 || spec.filters == 0 || spec.classes == 0 || spec.kernel == 0 {
                    return Err(Error::config("conv sizes must be positive"));
                }
                if spec.kernel > h || spec.kernel > w {
                    return Err(Error::config("conv kernel larger than input"));
                }
                let (oh, ow) = (h - spec.kernel + 1, w - spec.kernel + 1);
                let pooled = spec.filters * (oh / 2) * (ow / 2);
                if pooled == 0 {
                    return Err(Error::config("conv output vanishes after pooling"));
                }
                layout.push("conv.weight", vec![spec.filters, c, spec.kernel, spec.kernel]);
                layout.push("conv.bias", vec![spec.filters]);
                if spec.normalization == Normalization::Batch {
                    layout.push("conv.norm.gamma", vec![spec.filters]);
                    layout.push("conv.norm.beta", vec![spec.filters]);
                }
                layout.push("fc.weight", vec![pooled, spec.classes]);
                layout.push("fc.bias", vec![spec.classes]);
            }
            ModelSpec::Analytic { landscape, init } => {
                landscape.validate()?;
                if let AnalyticInit::Point(p) = init {
                    if p.len() != landscape.dim() {
                        return Err(Error::config("analytic init point has the wrong dimension"));
                    }
                }
                layout.push("phi", vec![landscape.dim()]);
            }
        }
        Ok(layout)
    }

    pub fn parameter_count(&self) -> Result<usize> {
        self.layout().map(|l| l.len())
    }

    pub fn input_features(&self) -> Option<usize> {
        match self {
            ModelSpec::Mlp(s) => s.widths.first().copied(),
            ModelSpec::SmallConv(s) => Some(s.input.iter().product()),
            ModelSpec::Analytic { .. } => None,
        }
    }

    pub fn outputs(&self) -> Option<usize> {
        match self {
            ModelSpec::Mlp(s) => s.widths.last().copied(),
            ModelSpec::SmallConv(s) => Some(s.classes),
            ModelSpec::Analytic { .. } => None,
        }
    }

    fn normalization_layers(&self) -> usize {
        match self {
            ModelSpec::Mlp(s) if s.normalization == Normalization::Batch => s.widths.len() - 2,
            ModelSpec::SmallConv(s) if s.normalization == Normalization::Batch => 1,
            _ => 0,
        }
    }

    fn norm_channels(&self) -> Vec<usize> {
        match self {
            ModelSpec::Mlp(s) if s.normalization == Normalization::Batch => s.widths[1..s.widths.len() - 1].to_vec(),
            ModelSpec::SmallConv(s) if s.normalization == Normalization::Batch => vec![s.filters],
            _ => Vec::new(),
        }
    }
}

/// Running mean and population variance of one normalization layer.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in normalization layers.
    Train,
    /// Stored running statistics in normalization layers.
    Eval,
}

enum Stats<'a> {
    Batch,
    Running(&'a [NormStats]),
    Calibrate(&'a mut Vec<NormStats>),
}

#[derive(Debug, Clone)]
pub struct Model {
    spec: ModelSpec,
    layout: Arc<Layout>,
    norm_stats: Vec<NormStats>,
}

impl Model {
    pub fn new(spec: ModelSpec) -> Result<Self> {
        let layout = Arc::new(spec.layout()?);
        let norm_stats = spec
            .norm_channels()
            .into_iter()
            .map(|c| NormStats {
                mean: vec![0.0; c],
                var: vec![1.0; c],
            })
            .collect();
        Ok(Model {
            spec,
            layout,
            norm_stats,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn is_analytic(&self) -> bool {
        matches!(self.spec, ModelSpec::Analytic { .. })
    }

    pub fn has_normalization(&self) -> bool {
        self.spec.normalization_layers() > 0
    }

    pub fn norm_stats(&self) -> &[NormStats] {
        &self.norm_stats
    }

    /// Seeded fan-in scaled uniform initialization, drawn in segment order.
    pub fn init_params(&self, seed: u64) -> ParameterVector {
        let mut rng = seeded(seed, 0);
        let mut params = ParameterVector::zeros(self.layout.clone());
        if let ModelSpec::Analytic { init, .. } = &self.spec {
            let data = params.as_mut_slice();
            match init {
                AnalyticInit::Point(p) => data.copy_from_slice(p),
                AnalyticInit::Uniform { low, high } => {
                    for v in data.iter_mut() {
                        *v = low + (high - low) * rng.random::<f64>();
                    }
                }
            }
            return params;
        }
        let segments: Vec<(String, Vec<usize>, core::ops::Range<usize>)> = self
            .layout
            .segments()
            .iter()
            .map(|s| (s.name.clone(), s.shape.clone(), s.range()))
            .collect();
        let mut fan_in = 1usize;
        for (name, shape, range) in segments {
            let data = &mut params.as_mut_slice()[range];
            if name.ends_with("norm.gamma") {
                data.fill(1.0);
                continue;
            }
            if name.ends_with("norm.beta") {
                continue;
            }
            if name.ends_with(".weight") {
                fan_in = match shape.len() {
                    2 => shape[0],
                    _ => shape[1..].iter().product(),
                };
            }
            let bound = 1.0 / libm::sqrt(fan_in as f64);
            for v in data.iter_mut() {
                *v = bound * (2.0 * rng.random::<f64>() - 1.0);
            }
        }
        params
    }

    /// Records the forward pass. Returns logits for classifiers and the loss
    /// itself for analytic landscapes.
    pub fn forward(&self, tape: &mut Tape<'_>, batch: &Batch, mode: Mode) -> Result<Var> {
        let stats = match mode {
            Mode::Train => Stats::Batch,
            Mode::Eval => Stats::Running(&self.norm_stats),
        };
        self.forward_with(tape, batch, stats)
    }

    fn forward_with(&self, tape: &mut Tape<'_>, batch: &Batch, mut stats: Stats<'_>) -> Result<Var> {
        if let ModelSpec::Analytic { landscape, .. } = &self.spec {
            let x = tape.all_params()?;
            let point = tape.value(x).data().to_vec();
            return tape.closed_form(x, landscape.value(&point), landscape.gradient(&point));
        }
        let features = self.spec.input_features().unwrap_or(0);
        if batch.features() != features {
            return Err(Error::config(alloc::format!(
                "model expects {features} input features, batch has {}",
                batch.features()
            )));
        }
        let input = tape.constant(batch.inputs().clone())?;
        let mut norm_index = 0;
        match &self.spec {
            ModelSpec::Mlp(spec) => {
                let mut h = input;
                for i in 0..spec.widths.len() - 2 {
                    let w = tape.param(&alloc::format!("hidden{i}.weight"))?;
                    let b = tape.param(&alloc::format!("hidden{i}.bias"))?;
                    h = tape.matmul(h, w)?;
                    h = tape.add_bias(h, b)?;
                    if spec.normalization == Normalization::Batch {
                        h = self.norm_layer(tape, h, &alloc::format!("hidden{i}.norm"), norm_index, &mut stats)?;
                        norm_index += 1;
                    }
                    h = activate(tape, h, spec.activation)?;
                }
                let mut outs = Vec::with_capacity(spec.heads);
                for head in 0..spec.heads {
                    let w = tape.param(&alloc::format!("head{head}.weight"))?;
                    let b = tape.param(&alloc::format!("head{head}.bias"))?;
                    let z = tape.matmul(h, w)?;
                    outs.push(tape.add_bias(z, b)?);
                }
                if spec.heads == 1 {
                    Ok(outs[0])
                } else {
                    tape.select_rows(&outs, batch.tasks())
                }
            }
            ModelSpec::SmallConv(spec) => {
                let [c, hgt, wid] = spec.input;
                let x = tape.reshape(input, vec![batch.len(), c, hgt, wid])?;
                let k = tape.param("conv.weight")?;
                let b = tape.param("conv.bias")?;
                let mut h = tape.conv2d(x, k)?;
                h = tape.add_bias(h, b)?;
                if spec.normalization == Normalization::Batch {
                    h = self.norm_layer(tape, h, "conv.norm", norm_index, &mut stats)?;
                }
                h = activate(tape, h, spec.activation)?;
                h = tape.avg_pool2(h)?;
                let flat = tape.value(h).len() / batch.len();
                h = tape.reshape(h, vec![batch.len(), flat])?;
                let w = tape.param("fc.weight")?;
                let b = tape.param("fc.bias")?;
                let z = tape.matmul(h, w)?;
                tape.add_bias(z, b)
            }
            ModelSpec::Analytic { .. } => unreachable!(),
        }
    }

    fn norm_layer(
        &self,
        tape: &mut Tape<'_>,
        x: Var,
        prefix: &str,
        index: usize,
        stats: &mut Stats<'_>,
    ) -> Result<Var> {
        let gamma = tape.param(&alloc::format!("{prefix}.gamma"))?;
        let beta = tape.param(&alloc::format!("{prefix}.beta"))?;
        match stats {
            Stats::Batch => tape.normalize(x, gamma, beta, None),
            Stats::Running(s) => {
                let s = &s[index];
                tape.normalize(x, gamma, beta, Some((&s.mean, &s.var)))
            }
            Stats::Calibrate(out) => {
                let shape = tape.value(x).shape().to_vec();
                let n = shape[0];
                let c = shape[1];
                let spatial = shape[2..].iter().product();
                let (mean, var) = channel_statistics(tape.value(x).data(), n, c, spatial);
                out.push(NormStats { mean, var });
                let s = out.last().unwrap().clone();
                tape.normalize(x, gamma, beta, Some((&s.mean, &s.var)))
            }
        }
    }
}

fn activate(tape: &mut Tape<'_>, x: Var, act: Activation) -> Result<Var> {
    match act {
        Activation::Relu => tape.relu(x),
        Activation::Tanh => tape.tanh(x),
    }
}

/// Builds the loss graph and seeded initial parameters for `spec`.
pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<(LossGraph, ParameterVector)> {
    let model = Model::new(spec.clone())?;
    let params = model.init_params(seed);
    let loss = if model.is_analytic() {
        LossKind::ClosedForm
    } else {
        LossKind::CrossEntropy
    };
    Ok((LossGraph::new(model, loss)?, params))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormRefresh {
    Updated,
    /// The model has no normalization layers; nothing changed.
    NoNormalization,
}

/// Replaces every running statistic with the dataset-wide per-channel
/// mean/variance, computed layer by layer in one pass over `dataset` in
/// dataset order. Trainable parameters are not touched.
pub fn recompute_norm_statistics(
    graph: &mut LossGraph,
    params: &ParameterVector,
    dataset: &Dataset,
) -> Result<NormRefresh> {
    if !graph.model().has_normalization() {
        return Ok(NormRefresh::NoNormalization);
    }
    if dataset.is_empty() {
        return Err(Error::config("cannot refresh statistics on an empty dataset"));
    }
    let batch = dataset.full_batch();
    let mut fresh = Vec::new();
    {
        let mut tape = Tape::new(params);
        graph
            .model()
            .forward_with(&mut tape, &batch, Stats::Calibrate(&mut fresh))?;
    }
    graph.model_mut().norm_stats = fresh;
    Ok(NormRefresh::Updated)
}
