//! Dense `f64` tensors with define-by-run reverse-mode differentiation.
//!
//! [`DenseTensor`] is a plain row-major value. Differentiable computation is
//! recorded on a [`Tape`] as [`Var`] handles; parameters live in a
//! [`ParamStore`] and receive accumulated gradients when a tape is consumed by
//! [`Tape::backward`].

mod gradcheck;
mod kernels;
mod param;
mod tape;

pub use gradcheck::{finite_diff_grad, relative_error, GRAD_REL_FLOOR};
pub use param::{ParamId, ParamStore, Parameter};
pub use tape::{Mode, Tape, Var};

use rand::Rng;

use crate::error::{Error, Result};

/// Uniform(-a, a) with `a = sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform<R: Rng + ?Sized>(
    dims: &[usize],
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Result<DenseTensor> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = dims.iter().product();
    DenseTensor::new(dims, (0..n).map(|_| rng.random_range(-a..a)).collect())
}

/// Tensor extents. Every extent is at least 1 and rank is between 1 and 4.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub const MAX_RANK: usize = 4;

    pub fn new(dims: &[usize]) -> Result<Self> {
        if dims.is_empty() || dims.len() > Self::MAX_RANK {
            return Err(Error::Contract(format!(
                "rank {} outside 1..={}",
                dims.len(),
                Self::MAX_RANK
            )));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Contract(format!("zero extent in shape {dims:?}")));
        }
        Ok(Shape(dims.to_vec()))
    }

    pub fn scalar() -> Self {
        Shape(vec![1])
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    pub fn last(&self) -> usize {
        *self.0.last().expect("rank >= 1")
    }
}

/// Row-major block of 64-bit floats.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseTensor {
    shape: Shape,
    values: Vec<f64>,
}

impl DenseTensor {
    pub fn new(dims: &[usize], values: Vec<f64>) -> Result<Self> {
        let shape = Shape::new(dims)?;
        if shape.numel() != values.len() {
            return Err(Error::Contract(format!(
                "shape {dims:?} holds {} values, got {}",
                shape.numel(),
                values.len()
            )));
        }
        Ok(DenseTensor { shape, values })
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        let shape = Shape::new(dims)?;
        let n = shape.numel();
        Ok(DenseTensor {
            shape,
            values: vec![0.0; n],
        })
    }

    pub fn scalar(v: f64) -> Self {
        DenseTensor {
            shape: Shape::scalar(),
            values: vec![v],
        }
    }

    pub fn vector(values: Vec<f64>) -> Result<Self> {
        Self::new(&[values.len()], values)
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        Self::new(&[rows, cols], values)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Contract("ragged rows".into()));
        }
        Self::matrix(rows.len(), cols, rows.concat())
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Rows of a rank-2 tensor (a rank-1 tensor counts as one row).
    pub fn rows(&self) -> usize {
        match self.shape.rank() {
            1 => 1,
            _ => self.numel() / self.shape.last(),
        }
    }

    pub fn cols(&self) -> usize {
        self.shape.last()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.values[r * c..(r + 1) * c]
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols() + c]
    }

    /// Scalar value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1);
        self.values[0]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn reshaped(mut self, dims: &[usize]) -> Result<Self> {
        let shape = Shape::new(dims)?;
        if shape.numel() != self.values.len() {
            return Err(Error::Dimension {
                op: "reshape",
                lhs: self.dims().to_vec(),
                rhs: dims.to_vec(),
            });
        }
        self.shape = shape;
        Ok(self)
    }

    /// Largest elementwise absolute difference; shapes must agree.
    pub fn max_abs_diff(&self, other: &DenseTensor) -> f64 {
        assert_eq!(self.dims(), other.dims());
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// True when both tensors have identical shape and bit patterns.
    pub fn bit_eq(&self, other: &DenseTensor) -> bool {
        self.dims() == other.dims()
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_rejects_zero_and_high_rank() {
        assert!(Shape::new(&[2, 0]).is_err());
        assert!(Shape::new(&[]).is_err());
        assert!(Shape::new(&[1, 1, 1, 1, 1]).is_err());
        assert_eq!(Shape::new(&[2, 3, 4]).unwrap().numel(), 24);
    }

    #[test]
    fn tensor_length_must_match_shape() {
        assert!(DenseTensor::new(&[2, 2], vec![1.0; 3]).is_err());
        let t = DenseTensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(t.at(1, 0), 3.0);
        assert_eq!(t.row(1), &[3.0, 4.0]);
    }
}
