//! Dense 64-bit tensors with reverse-mode gradient recording.
//!
//! The substrate is deliberately small: row-major `f64` storage, the handful
//! of kernels the denoiser networks need, and a tape ([`Tape`]) that records
//! forward operations so gradients can be propagated back into parameters.

mod kernels;
pub mod layers;
pub mod optim;
pub mod tape;

pub use tape::{GradStore, NodeId, Tape};

pub(crate) use kernels::{matmul_nt_raw, matmul_raw, matmul_tn_raw};

use crate::error::{CoreError, Result};
use crate::rng::RngStream;

/// A dense row-major tensor of 64-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(CoreError::ShapeMismatch(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    /// Rank-0 tensor holding a single value.
    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    /// 2-D tensor from nested rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(CoreError::ShapeMismatch("ragged rows".into()));
            }
            data.extend_from_slice(row);
        }
        Self::new(vec![r, c], data)
    }

    /// Standard-normal entries.
    pub fn randn(shape: &[usize], rng: &mut RngStream) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: rng.normal_vec(numel),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    /// The single value of a scalar (or one-element) tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data.clone())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn assert_finite(&self, context: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(CoreError::NonFinite(context.to_string()))
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn check_same_shape(&self, other: &Self, op: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(CoreError::ShapeMismatch(format!(
                "{op}: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other, "add")?;
        Ok(self.zip(other, |a, b| a + b))
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other, "sub")?;
        Ok(self.zip(other, |a, b| a - b))
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other, "mul")?;
        Ok(self.zip(other, |a, b| a * b))
    }

    /// `self + k * other`.
    pub fn add_scaled(&self, other: &Self, k: f64) -> Result<Self> {
        self.check_same_shape(other, "add_scaled")?;
        Ok(self.zip(other, |a, b| a + k * b))
    }

    pub fn scale(&self, k: f64) -> Self {
        self.map(|v| v * k)
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Extract the `i`-th block along the leading dim (shape loses that dim).
    pub fn index_leading(&self, i: usize) -> Result<Self> {
        if self.shape.is_empty() || i >= self.shape[0] {
            return Err(CoreError::ShapeMismatch(format!(
                "index {i} out of leading dim of {:?}",
                self.shape
            )));
        }
        let block = self.numel() / self.shape[0];
        Self::new(
            self.shape[1..].to_vec(),
            self.data[i * block..(i + 1) * block].to_vec(),
        )
    }

    /// Stack equally shaped tensors along a new leading dim.
    pub fn stack(parts: &[Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| CoreError::Contract("stack of zero tensors".into()))?;
        let mut data = Vec::with_capacity(first.numel() * parts.len());
        for p in parts {
            if p.shape != first.shape {
                return Err(CoreError::ShapeMismatch(format!(
                    "stack: {:?} vs {:?}",
                    p.shape, first.shape
                )));
            }
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&first.shape);
        Self::new(shape, data)
    }

    fn zip(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }
}

/// 2-D (or leading-folded) matrix product: `a` is `[.., k]`, `b` is `[k, n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() < 2 || b.rank() != 2 {
        return Err(CoreError::ShapeMismatch(format!(
            "matmul expects lhs rank >= 2 and rhs rank 2, got {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let k = *a.shape().last().unwrap();
    if k != b.shape()[0] {
        return Err(CoreError::ShapeMismatch(format!(
            "matmul inner dims: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let n = b.shape()[1];
    let m = a.numel() / k;
    let mut out_shape = a.shape().to_vec();
    *out_shape.last_mut().unwrap() = n;
    let mut out = vec![0.0; m * n];
    matmul_raw(a.data(), b.data(), m, k, n, &mut out);
    Tensor::new(out_shape, out)
}
