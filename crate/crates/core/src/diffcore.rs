//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! A [`Tape`] records every operation in construction order, which is already a
//! topological order, so the backward sweep is a single reverse pass with no
//! graph rewriting. Each forward op checks its output for NaN/Inf and reports
//! the op name on failure.
//!
//! Every reduction (batch means, matmul inner products, channel statistics)
//! accumulates left to right in index order, so repeated evaluations with the
//! same inputs are bit-identical.

use alloc::vec;
use alloc::vec::Vec;

use crate::data::Batch;
use crate::models::{Mode, Model};
use crate::tensor::{ParameterVector, Tensor};
use crate::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param {
        offset: usize,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    AddBias {
        x: Var,
        bias: Var,
    },
    Tanh {
        x: Var,
    },
    Relu {
        x: Var,
    },
    Conv2d {
        input: Var,
        weight: Var,
    },
    AvgPool2 {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    Norm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    SelectRows {
        sources: Vec<Var>,
        choice: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Mse {
        pred: Var,
        target: Vec<f64>,
    },
    ClosedForm {
        x: Var,
        grad: Vec<f64>,
    },
    Scale {
        x: Var,
        factor: f64,
    },
    Add {
        a: Var,
        b: Var,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Numerical epsilon added to the variance in normalization layers.
pub const NORM_EPS: f64 = 1e-5;

/// Records a computation over one parameter vector.
///
/// Single-writer: build, run [`Tape::backward`] once, drop.
pub struct Tape<'p> {
    params: &'p ParameterVector,
    nodes: Vec<Node>,
}

fn channel_geometry(shape: &[usize]) -> (usize, usize, usize) {
    let n = shape.first().copied().unwrap_or(1);
    let c = shape.get(1).copied().unwrap_or(1);
    let spatial = shape.iter().skip(2).product::<usize>();
    (n, c, spatial)
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParameterVector) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric { op: name });
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push("constant", value, Op::Constant)
    }

    /// Leaf reading the named parameter segment.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        let seg = self
            .params
            .layout()
            .get(name)
            .ok_or_else(|| Error::config(alloc::format!("unknown parameter segment `{name}`")))?;
        let data = self.params.as_slice()[seg.range()].to_vec();
        let value = Tensor::new(seg.shape.clone(), data)?;
        let offset = seg.offset;
        self.push("param", value, Op::Param { offset })
    }

    /// Leaf over the whole parameter vector as a 1-D tensor.
    pub fn all_params(&mut self) -> Result<Var> {
        let value = Tensor::new(vec![self.params.len()], self.params.as_slice().to_vec())?;
        self.push("param", value, Op::Param { offset: 0 })
    }

    /// `[m, k] x [k, n] -> [m, n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::config(alloc::format!("matmul shape mismatch {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (x, w) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let xv = x[i * k + p];
                let wrow = &w[p * n..(p + 1) * n];
                for j in 0..n {
                    row[j] += xv * wrow[j];
                }
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        self.push("matmul", value, Op::MatMul { a, b })
    }

    /// Adds a per-channel bias along axis 1 of `[n, c, ...]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let (n, c, spatial) = channel_geometry(&shape);
        if self.value(bias).len() != c {
            return Err(Error::config(alloc::format!(
                "bias of length {} does not match {c} channels",
                self.value(bias).len()
            )));
        }
        let b = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for s in 0..n {
            for (ch, bc) in b.iter().enumerate() {
                let base = (s * c + ch) * spatial;
                for v in &mut out[base..base + spatial] {
                    *v += bc;
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        self.push("add_bias", value, Op::AddBias { x, bias })
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let data = t.data().iter().map(|v| libm::tanh(*v)).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        self.push("tanh", value, Op::Tanh { x })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let data = t.data().iter().map(|v| if *v > 0.0 { *v } else { 0.0 }).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        self.push("relu", value, Op::Relu { x })
    }

    /// Valid, stride-1 convolution: `[n, c, h, w] * [f, c, kh, kw] -> [n, f, h-kh+1, w-kw+1]`.
    pub fn conv2d(&mut self, input: Var, weight: Var) -> Result<Var> {
        let si = self.value(input).shape().to_vec();
        let sw = self.value(weight).shape().to_vec();
        if si.len() != 4 || sw.len() != 4 || si[1] != sw[1] || sw[2] > si[2] || sw[3] > si[3] {
            return Err(Error::config(alloc::format!("conv2d shape mismatch {si:?} * {sw:?}")));
        }
        let (n, c, h, w) = (si[0], si[1], si[2], si[3]);
        let (f, kh, kw) = (sw[0], sw[2], sw[3]);
        let (oh, ow) = (h - kh + 1, w - kw + 1);
        let x = self.value(input).data();
        let k = self.value(weight).data();
        let mut out = vec![0.0; n * f * oh * ow];
        for s in 0..n {
            for fo in 0..f {
                let obase = (s * f + fo) * oh * ow;
                for ch in 0..c {
                    let xbase = (s * c + ch) * h * w;
                    let kbase = (fo * c + ch) * kh * kw;
                    for a in 0..kh {
                        for b in 0..kw {
                            let kv = k[kbase + a * kw + b];
                            for i in 0..oh {
                                let xrow = xbase + (i + a) * w + b;
                                let orow = obase + i * ow;
                                for j in 0..ow {
                                    out[orow + j] += kv * x[xrow + j];
                                }
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![n, f, oh, ow], out)?;
        self.push("conv2d", value, Op::Conv2d { input, weight })
    }

    /// 2x2 average pooling with stride 2; odd trailing rows/columns are dropped.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 4 {
            return Err(Error::config("avg_pool2 expects a 4-D tensor"));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        let d = self.value(x).data();
        let mut out = vec![0.0; n * c * oh * ow];
        for plane in 0..n * c {
            let ib = plane * h * w;
            let ob = plane * oh * ow;
            for i in 0..oh {
                for j in 0..ow {
                    let p = ib + 2 * i * w + 2 * j;
                    out[ob + i * ow + j] = 0.25 * (d[p] + d[p + 1] + d[p + w] + d[p + w + 1]);
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        self.push("avg_pool2", value, Op::AvgPool2 { x })
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        self.push("reshape", value, Op::Reshape { x })
    }

    /// Per-channel normalization along axis 1 followed by an affine map.
    ///
    /// With `stats = None` the statistics of the current batch are used and
    /// differentiated through; otherwise the given `(mean, var)` are constants.
    pub fn normalize(&mut self, x: Var, gamma: Var, beta: Var, stats: Option<(&[f64], &[f64])>) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let (n, c, spatial) = channel_geometry(&shape);
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::config("normalization affine parameters do not match channels"));
        }
        let (mean, var) = match stats {
            Some((m, v)) => {
                if m.len() != c || v.len() != c {
                    return Err(Error::config("running statistics do not match channels"));
                }
                (m.to_vec(), v.to_vec())
            }
            None => channel_statistics(self.value(x).data(), n, c, spatial),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / libm::sqrt(v + NORM_EPS)).collect();
        let d = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; d.len()];
        let mut out = vec![0.0; d.len()];
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * spatial;
                for idx in base..base + spatial {
                    let h = (d[idx] - mean[ch]) * inv_std[ch];
                    xhat[idx] = h;
                    out[idx] = g[ch] * h + b[ch];
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        self.push(
            "normalize",
            value,
            Op::Norm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: stats.is_none(),
            },
        )
    }

    /// Row `i` of the output is row `i` of `sources[choice[i]]`.
    pub fn select_rows(&mut self, sources: &[Var], choice: &[usize]) -> Result<Var> {
        let first = sources
            .first()
            .ok_or_else(|| Error::config("select_rows needs at least one source"))?;
        let shape = self.value(*first).shape().to_vec();
        if shape.len() != 2 || shape[0] != choice.len() {
            return Err(Error::config("select_rows expects [rows, cols] sources"));
        }
        let cols = shape[1];
        let mut out = vec![0.0; shape[0] * cols];
        for (i, &src) in choice.iter().enumerate() {
            let var = *sources
                .get(src)
                .ok_or_else(|| Error::config(alloc::format!("head index {src} out of range")))?;
            if self.value(var).shape() != shape.as_slice() {
                return Err(Error::config("select_rows sources differ in shape"));
            }
            out[i * cols..(i + 1) * cols].copy_from_slice(&self.value(var).data()[i * cols..(i + 1) * cols]);
        }
        let value = Tensor::new(shape, out)?;
        self.push(
            "select_rows",
            value,
            Op::SelectRows {
                sources: sources.to_vec(),
                choice: choice.to_vec(),
            },
        )
    }

    /// Mean softmax cross-entropy of `[m, c]` logits against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.value(logits).shape();
        if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
            return Err(Error::config("cross_entropy expects [batch, classes] logits"));
        }
        let (m, c) = (s[0], s[1]);
        let z = self.value(logits).data();
        let mut probs = vec![0.0; m * c];
        let mut total = 0.0;
        for i in 0..m {
            if labels[i] >= c {
                return Err(Error::config(alloc::format!(
                    "label {} out of range for {c} classes",
                    labels[i]
                )));
            }
            let row = &z[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (j, v) in row.iter().enumerate() {
                let e = libm::exp(v - max);
                probs[i * c + j] = e;
                sum += e;
            }
            for p in &mut probs[i * c..(i + 1) * c] {
                *p /= sum;
            }
            total += max + libm::log(sum) - row[labels[i]];
        }
        let value = Tensor::scalar(total / m as f64);
        self.push(
            "cross_entropy",
            value,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        )
    }

    /// Mean over all entries of the squared error.
    pub fn mse(&mut self, pred: Var, target: &[f64]) -> Result<Var> {
        let p = self.value(pred).data();
        if p.len() != target.len() || p.is_empty() {
            return Err(Error::config("mse target does not match prediction"));
        }
        let mut total = 0.0;
        for (a, b) in p.iter().zip(target) {
            total += (a - b) * (a - b);
        }
        let value = Tensor::scalar(total / p.len() as f64);
        self.push(
            "mse",
            value,
            Op::Mse {
                pred,
                target: target.to_vec(),
            },
        )
    }

    /// Scalar node whose value and gradient with respect to `x` are supplied
    /// by the caller (analytic landscapes).
    pub fn closed_form(&mut self, x: Var, value: f64, grad: Vec<f64>) -> Result<Var> {
        if grad.len() != self.value(x).len() {
            return Err(Error::config("closed-form gradient length mismatch"));
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric { op: "closed_form" });
        }
        self.push("closed_form", Tensor::scalar(value), Op::ClosedForm { x, grad })
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v * factor).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        self.push("scale", value, Op::Scale { x, factor })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::config("add shape mismatch"));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push("add", value, Op::Add { a, b })
    }

    /// Reverse sweep from a scalar node; returns d(output)/d(params).
    pub fn backward(&self, output: Var) -> Result<ParameterVector> {
        if self.value(output).len() != 1 {
            return Err(Error::config("backward requires a scalar output"));
        }
        let mut grad = self.params.zeros_like();
        let mut adj: Vec<Option<Vec<f64>>> = (0..=output.0).map(|_| None).collect();
        adj[output.0] = Some(vec![1.0]);

        for idx in (0..=output.0).rev() {
            let Some(dy) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Constant => {}
                Op::Param { offset } => {
                    let g = &mut grad.as_mut_slice()[*offset..*offset + dy.len()];
                    for (a, b) in g.iter_mut().zip(&dy) {
                        *a += b;
                    }
                }
                Op::MatMul { a, b } => {
                    let sa = self.value(*a).shape();
                    let (m, k) = (sa[0], sa[1]);
                    let n = self.value(*b).shape()[1];
                    let x = self.value(*a).data();
                    let w = self.value(*b).data();
                    let mut da = vec![0.0; m * k];
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        let dyrow = &dy[i * n..(i + 1) * n];
                        for p in 0..k {
                            let wrow = &w[p * n..(p + 1) * n];
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += dyrow[j] * wrow[j];
                            }
                            da[i * k + p] = acc;
                            let xv = x[i * k + p];
                            let dbrow = &mut db[p * n..(p + 1) * n];
                            for j in 0..n {
                                dbrow[j] += xv * dyrow[j];
                            }
                        }
                    }
                    accumulate(&mut adj, *a, da);
                    accumulate(&mut adj, *b, db);
                }
                Op::AddBias { x, bias } => {
                    let (n, c, spatial) = channel_geometry(node.value.shape());
                    let mut db = vec![0.0; c];
                    for s in 0..n {
                        for (ch, acc) in db.iter_mut().enumerate() {
                            let base = (s * c + ch) * spatial;
                            for v in &dy[base..base + spatial] {
                                *acc += v;
                            }
                        }
                    }
                    accumulate(&mut adj, *bias, db);
                    accumulate(&mut adj, *x, dy);
                }
                Op::Tanh { x } => {
                    let y = node.value.data();
                    let dx = dy.iter().zip(y).map(|(g, t)| g * (1.0 - t * t)).collect();
                    accumulate(&mut adj, *x, dx);
                }
                Op::Relu { x } => {
                    let xin = self.value(*x).data();
                    let dx = dy
                        .iter()
                        .zip(xin)
                        .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                        .collect();
                    accumulate(&mut adj, *x, dx);
                }
                Op::Conv2d { input, weight } => {
                    let si = self.value(*input).shape();
                    let sw = self.value(*weight).shape();
                    let (n, c, h, w) = (si[0], si[1], si[2], si[3]);
                    let (f, kh, kw) = (sw[0], sw[2], sw[3]);
                    let (oh, ow) = (h - kh + 1, w - kw + 1);
                    let x = self.value(*input).data();
                    let k = self.value(*weight).data();
                    let mut dx = vec![0.0; x.len()];
                    let mut dk = vec![0.0; k.len()];
                    for s in 0..n {
                        for fo in 0..f {
                            let obase = (s * f + fo) * oh * ow;
                            for ch in 0..c {
                                let xbase = (s * c + ch) * h * w;
                                let kbase = (fo * c + ch) * kh * kw;
                                for a in 0..kh {
                                    for b in 0..kw {
                                        let kv = k[kbase + a * kw + b];
                                        let mut acc = 0.0;
                                        for i in 0..oh {
                                            let xrow = xbase + (i + a) * w + b;
                                            let orow = obase + i * ow;
                                            for j in 0..ow {
                                                let g = dy[orow + j];
                                                acc += g * x[xrow + j];
                                                dx[xrow + j] += g * kv;
                                            }
                                        }
                                        dk[kbase + a * kw + b] += acc;
                                    }
                                }
                            }
                        }
                    }
                    accumulate(&mut adj, *input, dx);
                    accumulate(&mut adj, *weight, dk);
                }
                Op::AvgPool2 { x } => {
                    let s = self.value(*x).shape();
                    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
                    let (oh, ow) = (h / 2, w / 2);
                    let mut dx = vec![0.0; n * c * h * w];
                    for plane in 0..n * c {
                        let ib = plane * h * w;
                        let ob = plane * oh * ow;
                        for i in 0..oh {
                            for j in 0..ow {
                                let g = 0.25 * dy[ob + i * ow + j];
                                let p = ib + 2 * i * w + 2 * j;
                                dx[p] += g;
                                dx[p + 1] += g;
                                dx[p + w] += g;
                                dx[p + w + 1] += g;
                            }
                        }
                    }
                    accumulate(&mut adj, *x, dx);
                }
                Op::Reshape { x } => accumulate(&mut adj, *x, dy),
                Op::Norm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    batch_stats,
                } => {
                    let (n, c, spatial) = channel_geometry(node.value.shape());
                    let g = self.value(*gamma).data();
                    let count = (n * spatial) as f64;
                    let mut dgamma = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    for s in 0..n {
                        for ch in 0..c {
                            let base = (s * c + ch) * spatial;
                            for idx in base..base + spatial {
                                dgamma[ch] += dy[idx] * xhat[idx];
                                dbeta[ch] += dy[idx];
                            }
                        }
                    }
                    let mut dx = vec![0.0; dy.len()];
                    for s in 0..n {
                        for ch in 0..c {
                            let base = (s * c + ch) * spatial;
                            for idx in base..base + spatial {
                                let dxhat = dy[idx] * g[ch];
                                dx[idx] = if *batch_stats {
                                    // dgamma/dbeta hold sum(dy*xhat) and sum(dy); scale by gamma.
                                    inv_std[ch] / count
                                        * (count * dxhat - g[ch] * dbeta[ch] - xhat[idx] * g[ch] * dgamma[ch])
                                } else {
                                    dxhat * inv_std[ch]
                                };
                            }
                        }
                    }
                    accumulate(&mut adj, *x, dx);
                    accumulate(&mut adj, *gamma, dgamma);
                    accumulate(&mut adj, *beta, dbeta);
                }
                Op::SelectRows { sources, choice } => {
                    let cols = node.value.shape()[1];
                    let mut per_source: Vec<Option<Vec<f64>>> = sources.iter().map(|_| None).collect();
                    for (i, &src) in choice.iter().enumerate() {
                        let buf = per_source[src].get_or_insert_with(|| vec![0.0; dy.len()]);
                        buf[i * cols..(i + 1) * cols].copy_from_slice(&dy[i * cols..(i + 1) * cols]);
                    }
                    for (src, buf) in sources.iter().zip(per_source) {
                        if let Some(buf) = buf {
                            accumulate(&mut adj, *src, buf);
                        }
                    }
                }
                Op::CrossEntropy { logits, labels, probs } => {
                    let m = labels.len();
                    let c = probs.len() / m;
                    let scale = dy[0] / m as f64;
                    let mut dz = probs.clone();
                    for (i, &l) in labels.iter().enumerate() {
                        dz[i * c + l] -= 1.0;
                    }
                    for v in &mut dz {
                        *v *= scale;
                    }
                    accumulate(&mut adj, *logits, dz);
                }
                Op::Mse { pred, target } => {
                    let p = self.value(*pred).data();
                    let scale = 2.0 * dy[0] / p.len() as f64;
                    let dp = p.iter().zip(target).map(|(a, b)| scale * (a - b)).collect();
                    accumulate(&mut adj, *pred, dp);
                }
                Op::ClosedForm { x, grad: g } => {
                    let dx = g.iter().map(|v| v * dy[0]).collect();
                    accumulate(&mut adj, *x, dx);
                }
                Op::Scale { x, factor } => {
                    let dx = dy.iter().map(|v| v * factor).collect();
                    accumulate(&mut adj, *x, dx);
                }
                Op::Add { a, b } => {
                    accumulate(&mut adj, *a, dy.clone());
                    accumulate(&mut adj, *b, dy);
                }
            }
        }
        if !grad.is_finite() {
            return Err(Error::Numeric { op: "backward" });
        }
        Ok(grad)
    }
}

fn accumulate(adj: &mut [Option<Vec<f64>>], v: Var, delta: Vec<f64>) {
    match &mut adj[v.0] {
        Some(existing) => {
            for (a, b) in existing.iter_mut().zip(&delta) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

/// Per-channel mean and population variance of an `[n, c, spatial]` buffer,
/// both accumulated in index order.
pub fn channel_statistics(data: &[f64], n: usize, c: usize, spatial: usize) -> (Vec<f64>, Vec<f64>) {
    let count = (n * spatial) as f64;
    let mut mean = vec![0.0; c];
    for s in 0..n {
        for (ch, m) in mean.iter_mut().enumerate() {
            let base = (s * c + ch) * spatial;
            for v in &data[base..base + spatial] {
                *m += v;
            }
        }
    }
    for m in &mut mean {
        *m /= count;
    }
    let mut var = vec![0.0; c];
    for s in 0..n {
        for (ch, acc) in var.iter_mut().enumerate() {
            let base = (s * c + ch) * spatial;
            for v in &data[base..base + spatial] {
                let d = v - mean[ch];
                *acc += d * d;
            }
        }
    }
    for v in &mut var {
        *v /= count;
    }
    (mean, var)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    CrossEntropy,
    MeanSquaredError,
    /// The model output is already the loss (analytic landscapes).
    ClosedForm,
}

/// A model paired with its loss; the unit every optimizer differentiates.
#[derive(Debug, Clone)]
pub struct LossGraph {
    model: Model,
    loss: LossKind,
}

impl LossGraph {
    pub fn new(model: Model, loss: LossKind) -> Result<Self> {
        let analytic = model.is_analytic();
        if analytic != (loss == LossKind::ClosedForm) {
            return Err(Error::config(
                "closed-form loss is used exactly for analytic landscapes",
            ));
        }
        Ok(LossGraph { model, loss })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut Model {
        &mut self.model
    }

    pub fn loss_kind(&self) -> LossKind {
        self.loss
    }

    /// Records forward pass and loss for `batch` on `tape`.
    pub fn build_loss(&self, tape: &mut Tape<'_>, batch: &Batch) -> Result<Var> {
        if batch.is_empty() {
            return Err(Error::config("batch is empty"));
        }
        let out = self.model.forward(tape, batch, Mode::Train)?;
        match self.loss {
            LossKind::ClosedForm => Ok(out),
            LossKind::CrossEntropy => tape.cross_entropy(out, batch.labels()),
            LossKind::MeanSquaredError => {
                let target = batch.regression_target(tape.value(out).shape()[1]);
                tape.mse(out, &target)
            }
        }
    }

    fn check_params(&self, params: &ParameterVector) -> Result<()> {
        if params.layout().as_ref() != self.model.layout().as_ref() {
            return Err(Error::config("parameter vector does not match the model"));
        }
        Ok(())
    }

    /// Mean loss over the batch.
    pub fn evaluate(&self, params: &ParameterVector, batch: &Batch) -> Result<f64> {
        self.check_params(params)?;
        let mut tape = Tape::new(params);
        let loss = self.build_loss(&mut tape, batch)?;
        Ok(tape.value(loss).data()[0])
    }

    pub fn value_and_gradient(&self, params: &ParameterVector, batch: &Batch) -> Result<(f64, ParameterVector)> {
        self.check_params(params)?;
        let mut tape = Tape::new(params);
        let loss = self.build_loss(&mut tape, batch)?;
        let grad = tape.backward(loss)?;
        Ok((tape.value(loss).data()[0], grad))
    }

    pub fn gradient(&self, params: &ParameterVector, batch: &Batch) -> Result<ParameterVector> {
        self.value_and_gradient(params, batch).map(|(_, g)| g)
    }

    /// Arg-max predictions with normalization layers in inference mode.
    pub fn predict(&self, params: &ParameterVector, batch: &Batch) -> Result<Vec<usize>> {
        self.check_params(params)?;
        if self.model.is_analytic() {
            return Err(Error::config("analytic landscapes do not classify"));
        }
        let mut tape = Tape::new(params);
        let out = self.model.forward(&mut tape, batch, Mode::Eval)?;
        let t = tape.value(out);
        let c = t.shape()[1];
        Ok(t.data()
            .chunks(c)
            .map(|row| {
                let mut best = 0;
                for (j, v) in row.iter().enumerate() {
                    if *v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect())
    }
}

pub const FD_SCALE_FLOOR: f64 = 1e-4;

/// Max relative error between the tape gradient and central differences.
///
/// Checks at most `max_coords` coordinates, evenly strided over the vector.
/// The error is `|analytic − numeric| / max(|analytic|, |numeric|, 1e-4)`:
/// relative for ordinary gradients, absolute near zero, where central
/// differences only see rounding noise. An empty parameter vector yields 0.
pub fn finite_difference_check(
    graph: &LossGraph,
    params: &ParameterVector,
    batch: &Batch,
    step: f64,
    max_coords: usize,
) -> Result<f64> {
    if step.is_nan() || step <= 0.0 {
        return Err(Error::config("finite-difference step must be positive"));
    }
    let n = params.len();
    if n == 0 || max_coords == 0 {
        return Ok(0.0);
    }
    let analytic = graph.gradient(params, batch)?;
    let count = max_coords.min(n);
    let mut worst: f64 = 0.0;
    let mut probe = params.clone();
    for i in 0..count {
        let j = i * n / count;
        let orig = params.as_slice()[j];
        probe.as_mut_slice()[j] = orig + step;
        let up = graph.evaluate(&probe, batch)?;
        probe.as_mut_slice()[j] = orig - step;
        let down = graph.evaluate(&probe, batch)?;
        probe.as_mut_slice()[j] = orig;
        let numeric = (up - down) / (2.0 * step);
        let a = analytic.as_slice()[j];
        let scale = libm::fabs(a).max(libm::fabs(numeric)).max(FD_SCALE_FLOOR);
        let err = libm::fabs(a - numeric) / scale;
        worst = worst.max(err);
    }
    Ok(worst)
}
