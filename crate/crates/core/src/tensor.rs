//! Dense row-major tensors.
//!
//! A [`Tensor`] is a shape plus a flat buffer. Element `(i, j, ...)` lives at
//! offset `i * stride_0 + j * stride_1 + ...` where the last axis has stride 1.
//!
//! Binary elementwise ops accept either equal shapes or a right operand whose
//! shape is a trailing suffix of the left operand's shape. In the second case
//! the right operand is repeated along the leading axes of the left one, so a
//! `[F]` bias broadcasts over a `[batch, L, M, F]` activation.

use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("domain error: {0}")]
    Domain(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(TensorError::Shape("empty shape".into()));
    }
    if let Some(axis) = shape.iter().position(|&d| d == 0) {
        return Err(TensorError::Shape(format!(
            "zero extent on axis {axis} of {shape:?}"
        )));
    }
    Ok(shape.iter().product())
}

/// Row-major strides for `shape`.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut out = vec![1; shape.len()];
    for axis in (0..shape.len().saturating_sub(1)).rev() {
        out[axis] = out[axis + 1] * shape[axis + 1];
    }
    out
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Result<Self> {
        let n = check_shape(shape)?;
        Ok(Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        })
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != data.len() {
            return Err(TensorError::Shape(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Builds a rank-0-like vector tensor of shape `[len]`.
    pub fn vector(data: Vec<T>) -> Result<Self> {
        let len = data.len();
        Self::from_vec(&[len], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn offset(&self, index: &[usize]) -> Result<usize> {
        if index.len() != self.shape.len() {
            return Err(TensorError::Shape(format!(
                "index rank {} does not match tensor rank {}",
                index.len(),
                self.shape.len()
            )));
        }
        let mut off = 0;
        for (axis, (&i, &d)) in index.iter().zip(&self.shape).enumerate() {
            if i >= d {
                return Err(TensorError::Shape(format!(
                    "index {i} out of range {d} on axis {axis}"
                )));
            }
            off = off * d + i;
        }
        Ok(off)
    }

    pub fn index_of(&self, offset: usize) -> Result<Vec<usize>> {
        if offset >= self.data.len() {
            return Err(TensorError::Shape(format!(
                "offset {offset} out of range {}",
                self.data.len()
            )));
        }
        let mut rest = offset;
        let mut index = vec![0; self.shape.len()];
        for axis in (0..self.shape.len()).rev() {
            index[axis] = rest % self.shape[axis];
            rest /= self.shape[axis];
        }
        Ok(index)
    }

    pub fn get(&self, index: &[usize]) -> Result<T> {
        Ok(self.data[self.offset(index)?])
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Self::from_vec(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Elementwise combination under the trailing-suffix broadcast rule.
    pub fn zip_with(&self, rhs: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        let n = self.shape.len();
        let m = rhs.shape.len();
        if m > n || self.shape[n - m..] != rhs.shape[..] {
            return Err(TensorError::Shape(format!(
                "cannot broadcast {:?} onto {:?}",
                rhs.shape, self.shape
            )));
        }
        let period = rhs.data.len();
        let data = self
            .data
            .chunks_exact(period)
            .flat_map(|chunk| chunk.iter().zip(&rhs.data).map(|(&a, &b)| f(a, b)))
            .collect();
        Ok(Self {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn add(&self, rhs: &Self) -> Result<Self> {
        self.zip_with(rhs, |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Self) -> Result<Self> {
        self.zip_with(rhs, |a, b| a - b)
    }

    pub fn mul(&self, rhs: &Self) -> Result<Self> {
        self.zip_with(rhs, |a, b| a * b)
    }

    pub fn maximum(&self, rhs: &Self) -> Result<Self> {
        self.zip_with(rhs, |a, b| if b > a { b } else { a })
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|x| x * s)
    }

    pub fn exp(&self) -> Self {
        self.map(T::exp)
    }

    /// Natural log. Negative entries are a domain error; exact zeros map to
    /// `-inf`, which callers in the log domain replace with a finite floor.
    pub fn ln(&self) -> Result<Self> {
        if let Some(pos) = self.data.iter().position(|&x| x < T::zero() || x.is_nan()) {
            return Err(TensorError::Domain(format!(
                "ln of {} at offset {pos}",
                self.data[pos]
            )));
        }
        Ok(self.map(T::ln))
    }

    pub fn relu(&self) -> Self {
        self.map(|x| if x > T::zero() { x } else { T::zero() })
    }

    fn reduce_axis(
        &self,
        axis: usize,
        f: impl Fn(&mut dyn Iterator<Item = (usize, T)>) -> T,
    ) -> Result<Self> {
        if axis >= self.shape.len() {
            return Err(TensorError::Shape(format!(
                "axis {axis} out of range for rank {}",
                self.shape.len()
            )));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let extent = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let base = o * extent * inner + i;
                let mut it = (0..extent).map(|k| (k, self.data[base + k * inner]));
                data.push(f(&mut it));
            }
        }
        let mut shape: Vec<usize> = self.shape.clone();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        Ok(Self { shape, data })
    }

    /// Maximum along `axis`; the axis is removed (a rank-1 input yields `[1]`).
    pub fn max_axis(&self, axis: usize) -> Result<Self> {
        self.reduce_axis(axis, |it| {
            it.map(|(_, x)| x)
                .fold(T::neg_infinity(), |a, b| if b > a { b } else { a })
        })
    }

    pub fn sum_axis(&self, axis: usize) -> Result<Self> {
        self.reduce_axis(axis, |it| it.map(|(_, x)| x).fold(T::zero(), |a, b| a + b))
    }

    /// Index of the maximum along `axis`; ties resolve to the lowest index.
    pub fn argmax_axis(&self, axis: usize) -> Result<Vec<usize>> {
        let t = self.reduce_axis(axis, |it| {
            let mut best = (0usize, T::neg_infinity());
            for (k, x) in it {
                if k == 0 || x > best.1 {
                    best = (k, x);
                }
            }
            T::from_usize(best.0).expect("index fits in scalar")
        })?;
        Ok(t.data
            .iter()
            .map(|x| x.to_usize().expect("non-negative index"))
            .collect())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}
