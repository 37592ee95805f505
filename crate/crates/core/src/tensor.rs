//! Dense row-major tensors and the flat parameter vector every optimizer works on.

use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::config(alloc::format!(
                "tensor shape {:?} needs {} values, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(Error::config(alloc::format!(
                "cannot reshape {:?} into {:?}",
                self.shape,
                shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    /// First dimension, or 1 for scalars.
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> core::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Ordered named segments covering a flat buffer exactly.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Layout {
    segments: Vec<Segment>,
    len: usize,
}

impl Layout {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>) -> &Segment {
        let seg = Segment {
            name: name.into(),
            shape,
            offset: self.len,
        };
        self.len += seg.len();
        self.segments.push(seg);
        self.segments.last().unwrap()
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn get(&self, name: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.name == name)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// All trainable parameters of a model, stored contiguously.
///
/// Clones share the layout; arithmetic helpers require both operands to carry
/// the same segmentation and panic otherwise, since mixing layouts is a
/// programming error rather than a runtime condition.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterVector {
    layout: Arc<Layout>,
    data: Vec<f64>,
}

impl ParameterVector {
    pub fn zeros(layout: Arc<Layout>) -> Self {
        let data = vec![0.0; layout.len()];
        ParameterVector { layout, data }
    }

    pub fn from_data(layout: Arc<Layout>, data: Vec<f64>) -> Result<Self> {
        if data.len() != layout.len() {
            return Err(Error::config(alloc::format!(
                "parameter buffer has {} values, layout expects {}",
                data.len(),
                layout.len()
            )));
        }
        Ok(ParameterVector { layout, data })
    }

    /// Builds a vector from named tensors, laying segments out in order.
    pub fn flatten(tensors: Vec<(String, Tensor)>) -> Self {
        let mut layout = Layout::new();
        let mut data = Vec::new();
        for (name, t) in tensors {
            layout.push(name, t.shape().to_vec());
            data.extend_from_slice(t.data());
        }
        ParameterVector {
            layout: Arc::new(layout),
            data,
        }
    }

    pub fn unflatten(&self) -> Vec<(String, Tensor)> {
        self.layout
            .segments()
            .iter()
            .map(|s| {
                let t = Tensor {
                    shape: s.shape.clone(),
                    data: self.data[s.range()].to_vec(),
                };
                (s.name.clone(), t)
            })
            .collect()
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn segment(&self, name: &str) -> Option<&[f64]> {
        self.layout.get(name).map(|s| &self.data[s.range()])
    }

    pub fn segment_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let range = self.layout.get(name)?.range();
        Some(&mut self.data[range])
    }

    pub fn same_layout(&self, other: &ParameterVector) -> bool {
        Arc::ptr_eq(&self.layout, &other.layout) || self.layout == other.layout
    }

    fn check(&self, other: &ParameterVector) {
        assert!(
            self.same_layout(other),
            "parameter vectors have different segmentations"
        );
    }

    pub fn zeros_like(&self) -> Self {
        ParameterVector::zeros(self.layout.clone())
    }

    /// `self += scale * other`
    pub fn axpy(&mut self, scale: f64, other: &ParameterVector) {
        self.check(other);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    /// `self + other`
    pub fn add(&self, other: &ParameterVector) -> Self {
        self.check(other);
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        ParameterVector {
            layout: self.layout.clone(),
            data,
        }
    }

    /// `self - other`
    pub fn sub(&self, other: &ParameterVector) -> Self {
        self.check(other);
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        ParameterVector {
            layout: self.layout.clone(),
            data,
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for v in &mut self.data {
            *v *= factor;
        }
    }

    pub fn dot(&self, other: &ParameterVector) -> f64 {
        self.check(other);
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        libm::sqrt(self.data.iter().map(|v| v * v).sum())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute coordinate difference.
    pub fn max_abs_diff(&self, other: &ParameterVector) -> f64 {
        self.check(other);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| libm::fabs(a - b))
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;
    use proptest::prelude::*;

    #[test]
    fn tensor_shape_must_match_data() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn segments_cover_buffer() {
        let p = ParameterVector::flatten(vec![
            (
                "w".to_string(),
                Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
            ),
            ("b".to_string(), Tensor::new(vec![2], vec![5.0, 6.0]).unwrap()),
        ]);
        let segs = p.layout().segments();
        assert_eq!(segs[0].offset, 0);
        assert_eq!(segs[1].offset, 4);
        assert_eq!(p.layout().len(), 6);
        assert_eq!(p.segment("b").unwrap(), &[5.0, 6.0]);
    }

    proptest! {
        #[test]
        fn flatten_unflatten_is_bitwise_identity(
            shapes in proptest::collection::vec(proptest::collection::vec(1usize..4, 0..3), 0..5),
            seed in any::<u64>(),
        ) {
            let mut tensors = Vec::new();
            let mut x = seed;
            for (i, shape) in shapes.into_iter().enumerate() {
                let n: usize = shape.iter().product();
                let data = (0..n)
                    .map(|_| {
                        x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                        f64::from_bits((x >> 12) | 0x3ff0_0000_0000_0000) - 1.5
                    })
                    .collect();
                tensors.push((alloc::format!("t{i}"), Tensor::new(shape, data).unwrap()));
            }
            let v = ParameterVector::flatten(tensors);
            let round = ParameterVector::flatten(v.unflatten());
            prop_assert_eq!(round.layout(), v.layout());
            let a: Vec<u64> = v.as_slice().iter().map(|f| f.to_bits()).collect();
            let b: Vec<u64> = round.as_slice().iter().map(|f| f.to_bits()).collect();
            prop_assert_eq!(a, b);
        }
    }
}
