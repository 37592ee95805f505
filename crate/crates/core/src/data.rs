//! Datasets, minibatches, task splits and the IDX binary format.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::rng::seeded;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Labelled examples stored row-major, one row of `features` values each.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Vec<f64>,
    feature_shape: Vec<usize>,
    labels: Vec<usize>,
    classes: usize,
    provenance: String,
    head: usize,
}

impl Dataset {
    pub fn new(
        inputs: Vec<f64>,
        feature_shape: Vec<usize>,
        labels: Vec<usize>,
        classes: usize,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        let features: usize = feature_shape.iter().product();
        if labels.is_empty() {
            return Err(Error::config("dataset has no examples"));
        }
        if inputs.len() != labels.len() * features {
            return Err(Error::config(alloc::format!(
                "{} inputs do not form {} rows of {features} features",
                inputs.len(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|l| **l >= classes) {
            return Err(Error::config(alloc::format!("label {bad} outside [0, {classes})")));
        }
        Ok(Dataset {
            inputs,
            feature_shape,
            labels,
            classes,
            provenance: provenance.into(),
            head: 0,
        })
    }

    /// Tags every example with an output head (task) index.
    pub fn with_head(mut self, head: usize) -> Self {
        self.head = head;
        self
    }

    pub fn head(&self) -> usize {
        self.head
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self) -> usize {
        self.feature_shape.iter().product()
    }

    pub fn feature_shape(&self) -> &[usize] {
        &self.feature_shape
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    pub fn input(&self, i: usize) -> &[f64] {
        let f = self.features();
        &self.inputs[i * f..(i + 1) * f]
    }

    pub fn batch(&self, indices: &[usize]) -> Batch {
        let f = self.features();
        let mut inputs = Vec::with_capacity(indices.len() * f);
        for &i in indices {
            inputs.extend_from_slice(self.input(i));
        }
        Batch {
            indices: indices.to_vec(),
            inputs: Tensor::new(vec![indices.len(), f], inputs).expect("row-major batch"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            tasks: vec![self.head; indices.len()],
            targets: None,
        }
    }

    pub fn full_batch(&self) -> Batch {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.batch(&idx)
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let mut inputs = Vec::with_capacity(indices.len() * self.features());
        for &i in indices {
            inputs.extend_from_slice(self.input(i));
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Dataset::new(
            inputs,
            self.feature_shape.clone(),
            labels,
            self.classes,
            self.provenance.clone(),
        )
        .map(|d| d.with_head(self.head))
    }

    /// Seeded split; the first `round(test_fraction * N)` permuted rows become the test set.
    pub fn train_test_split(&self, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(Error::config("test fraction must lie in [0, 1)"));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut seeded(seed, u64::MAX));
        let n_test = libm::round(test_fraction * self.len() as f64) as usize;
        if n_test == 0 || n_test == self.len() {
            return Err(Error::config("split leaves an empty train or test set"));
        }
        let (test, train) = order.split_at(n_test);
        let (mut train, mut test) = (train.to_vec(), test.to_vec());
        train.sort_unstable();
        test.sort_unstable();
        Ok((self.subset(&train)?, self.subset(&test)?))
    }

    /// Replaces each label, with probability `fraction`, by a uniformly drawn
    /// class (possibly the same one).
    pub fn with_label_noise(mut self, fraction: f64, seed: u64) -> Result<Dataset> {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(Error::config("label noise must lie in [0, 1]"));
        }
        let mut rng = seeded(seed, u64::MAX - 2);
        for l in &mut self.labels {
            if rng.random::<f64>() < fraction {
                *l = rng.random_range(0..self.classes);
            }
        }
        Ok(self)
    }
}

/// A minibatch with materialized tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    indices: Vec<usize>,
    inputs: Tensor,
    labels: Vec<usize>,
    tasks: Vec<usize>,
    targets: Option<Vec<f64>>,
}

impl Batch {
    pub fn new(inputs: Tensor, labels: Vec<usize>, tasks: Vec<usize>) -> Result<Self> {
        if inputs.shape().len() != 2 || inputs.rows() != labels.len() || tasks.len() != labels.len() {
            return Err(Error::config("batch inputs, labels and tasks disagree"));
        }
        Ok(Batch {
            indices: (0..labels.len()).collect(),
            inputs,
            labels,
            tasks,
            targets: None,
        })
    }

    /// One featureless row; the batch analytic landscapes are evaluated on.
    pub fn unit() -> Self {
        Batch {
            indices: vec![0],
            inputs: Tensor::zeros(vec![1, 0]),
            labels: vec![0],
            tasks: vec![0],
            targets: None,
        }
    }

    /// Real-valued targets for mean-squared-error losses, row-major.
    pub fn with_targets(mut self, targets: Vec<f64>) -> Self {
        self.targets = Some(targets);
        self
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self) -> usize {
        self.inputs.shape().get(1).copied().unwrap_or(0)
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn tasks(&self) -> &[usize] {
        &self.tasks
    }

    /// Explicit targets if present, else one-hot labels over `outputs` columns.
    pub fn regression_target(&self, outputs: usize) -> Vec<f64> {
        if let Some(t) = &self.targets {
            return t.clone();
        }
        let mut t = vec![0.0; self.len() * outputs];
        for (i, &l) in self.labels.iter().enumerate() {
            if l < outputs {
                t[i * outputs + l] = 1.0;
            }
        }
        t
    }

    /// Rows of `self` followed by rows of `other`.
    pub fn concat(&self, other: &Batch) -> Result<Batch> {
        if self.features() != other.features() {
            return Err(Error::config("cannot concatenate batches of different widths"));
        }
        let mut data = self.inputs.data().to_vec();
        data.extend_from_slice(other.inputs.data());
        let rows = self.len() + other.len();
        let targets = match (&self.targets, &other.targets) {
            (Some(a), Some(b)) => Some(a.iter().chain(b).copied().collect()),
            _ => None,
        };
        Ok(Batch {
            indices: self.indices.iter().chain(&other.indices).copied().collect(),
            inputs: Tensor::new(vec![rows, self.features()], data)?,
            labels: self.labels.iter().chain(&other.labels).copied().collect(),
            tasks: self.tasks.iter().chain(&other.tasks).copied().collect(),
            targets,
        })
    }
}

/// Isotropic unit-variance Gaussian classes centred on the vertices of a
/// regular simplex with pairwise distance `separation`.
///
/// Centroid `c` is `separation / √2 · e_c`, so `dim` must be at least `classes`.
/// Rows are grouped by class, `per_class` rows each.
pub fn gen_gaussian_blobs(classes: usize, per_class: usize, dim: usize, separation: f64, seed: u64) -> Result<Dataset> {
    if classes < 2 || per_class < 1 {
        return Err(Error::config("need at least two classes and one example per class"));
    }
    if dim < classes {
        return Err(Error::config("blob dimension must be at least the class count"));
    }
    let mut rng = seeded(seed, 0);
    let offset = separation / core::f64::consts::SQRT_2;
    let mut inputs = Vec::with_capacity(classes * per_class * dim);
    let mut labels = Vec::with_capacity(classes * per_class);
    for c in 0..classes {
        for _ in 0..per_class {
            for d in 0..dim {
                let z: f64 = StandardNormal.sample(&mut rng);
                inputs.push(if d == c { offset + z } else { z });
            }
            labels.push(c);
        }
    }
    Dataset::new(inputs, vec![dim], labels, classes, "gaussian-blobs")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub train: Dataset,
    pub test: Dataset,
    /// Original class ids, in remapped label order.
    pub classes: Vec<usize>,
    pub head: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskStream {
    pub tasks: Vec<Task>,
}

impl TaskStream {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn ways(&self) -> usize {
        self.tasks.first().map_or(0, |t| t.classes.len())
    }
}

/// Partitions classes into consecutive groups of `ways`; group `t` becomes
/// task `t` with head `t` and labels remapped to `[0, ways)`.
pub fn split_tasks(dataset: &Dataset, ways: usize, test_fraction: f64, seed: u64) -> Result<TaskStream> {
    if ways == 0 || !dataset.classes().is_multiple_of(ways) {
        return Err(Error::config(alloc::format!(
            "{} classes cannot be split into {ways}-way tasks",
            dataset.classes()
        )));
    }
    let n_tasks = dataset.classes() / ways;
    let mut tasks = Vec::with_capacity(n_tasks);
    for t in 0..n_tasks {
        let classes: Vec<usize> = (t * ways..(t + 1) * ways).collect();
        let mut inputs = Vec::new();
        let mut labels = Vec::new();
        for i in 0..dataset.len() {
            let l = dataset.labels()[i];
            if l / ways == t {
                inputs.extend_from_slice(dataset.input(i));
                labels.push(l - t * ways);
            }
        }
        let provenance = alloc::format!("{}/task{t}", dataset.provenance());
        let all = Dataset::new(inputs, dataset.feature_shape().to_vec(), labels, ways, provenance)?.with_head(t);
        let (train, test) = all.train_test_split(test_fraction, seed.wrapping_add(t as u64))?;
        tasks.push(Task {
            train,
            test,
            classes,
            head: t,
        });
    }
    Ok(TaskStream { tasks })
}

/// Batches over one epoch.
pub struct BatchIter<'a> {
    dataset: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    drop_last: bool,
    pos: usize,
}

/// Epoch `epoch` of a seeded permutation (or dataset order when `shuffle` is
/// `None`). The permutation for any epoch is computed directly from
/// `(seed, epoch)`.
pub fn batch_iterator(
    dataset: &Dataset,
    batch_size: usize,
    shuffle: Option<u64>,
    epoch: u64,
    drop_last: bool,
) -> Result<BatchIter<'_>> {
    if batch_size == 0 {
        return Err(Error::config("batch size must be at least 1"));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    if let Some(seed) = shuffle {
        order.shuffle(&mut seeded(seed, epoch));
    }
    Ok(BatchIter {
        dataset,
        order,
        batch_size,
        drop_last,
        pos: 0,
    })
}

impl BatchIter<'_> {
    pub fn order(&self) -> &[usize] {
        &self.order
    }
}

impl Iterator for BatchIter<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        let remaining = self.order.len() - self.pos;
        if remaining == 0 || (self.drop_last && remaining < self.batch_size) {
            return None;
        }
        let end = self.pos + remaining.min(self.batch_size);
        let batch = self.dataset.batch(&self.order[self.pos..end]);
        self.pos = end;
        Some(batch)
    }
}

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(offset.min(bytes.len()), "truncated header"))
}

/// Parses an IDX file of unsigned bytes; returns its dimensions and payload.
pub fn decode_idx(bytes: &[u8], magic: u32) -> Result<(Vec<usize>, &[u8])> {
    let found = read_u32(bytes, 0)?;
    if found != magic {
        return Err(Error::format(
            0,
            alloc::format!("bad magic number {found:#010x}, expected {magic:#010x}"),
        ));
    }
    let ndims = (magic & 0xff) as usize;
    let mut dims = Vec::with_capacity(ndims);
    for d in 0..ndims {
        dims.push(read_u32(bytes, 4 + 4 * d)? as usize);
    }
    let start = 4 + 4 * ndims;
    let len: usize = dims.iter().product();
    if bytes.len() < start + len {
        return Err(Error::format(
            bytes.len(),
            alloc::format!("payload truncated: expected {len} bytes after header"),
        ));
    }
    if bytes.len() > start + len {
        return Err(Error::format(start + len, "trailing bytes after payload"));
    }
    Ok((dims, &bytes[start..]))
}

/// Builds a dataset from IDX image (`0x803`) and label (`0x801`) files.
/// Pixels are scaled to `[0, 1]`; the class count is `max label + 1`.
pub fn idx_dataset(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let (idims, pixels) = decode_idx(images, IDX_IMAGES_MAGIC)?;
    let (ldims, lbytes) = decode_idx(labels, IDX_LABELS_MAGIC)?;
    if idims[0] != ldims[0] {
        return Err(Error::format(
            4,
            alloc::format!("{} images but {} labels", idims[0], ldims[0]),
        ));
    }
    let labels: Vec<usize> = lbytes.iter().map(|b| *b as usize).collect();
    let classes = labels.iter().copied().max().map_or(1, |m| m + 1);
    let inputs = pixels.iter().map(|p| *p as f64 / 255.0).collect();
    Dataset::new(inputs, vec![1, idims[1], idims[2]], labels, classes, "idx").map_err(|e| match e {
        Error::Config(reason) => Error::format(0, reason),
        other => other,
    })
}

fn encode_idx(magic: u32, dims: &[usize], payload: impl Iterator<Item = u8>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&magic.to_be_bytes());
    for d in dims {
        out.extend_from_slice(&(*d as u32).to_be_bytes());
    }
    out.extend(payload);
    out
}

/// Inverse of [`idx_dataset`]: `(images, labels)` file contents.
pub fn encode_idx_dataset(dataset: &Dataset) -> Result<(Vec<u8>, Vec<u8>)> {
    let shape = dataset.feature_shape();
    let (rows, cols) = match shape {
        [1, r, c] | [r, c] => (*r, *c),
        _ => return Err(Error::config("IDX images need a [rows, cols] feature shape")),
    };
    if dataset.classes() > 256 {
        return Err(Error::config("IDX labels are single bytes"));
    }
    let images = encode_idx(
        IDX_IMAGES_MAGIC,
        &[dataset.len(), rows, cols],
        dataset
            .inputs()
            .iter()
            .map(|v| libm::round(v.clamp(0.0, 1.0) * 255.0) as u8),
    );
    let labels = encode_idx(
        IDX_LABELS_MAGIC,
        &[dataset.len()],
        dataset.labels().iter().map(|l| *l as u8),
    );
    Ok((images, labels))
}
