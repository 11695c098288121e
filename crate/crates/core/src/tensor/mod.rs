//! Dense `f64` tensors and a reverse-mode differentiation tape.
//!
//! A [`Tensor`] owns its data in row-major order. Computation happens on a
//! [`Tape`]: tensors enter it as leaves, every operation appends a node, and
//! [`Tape::backward`] walks the nodes in reverse to fill leaf gradients.
//!
//! The only implicit shape rule is singleton expansion of the *second*
//! operand of a binary op: `b` must have the same rank as `a`, and each extent
//! of `b` must either equal the matching extent of `a` or be 1.

mod conv;
pub mod gradcheck;
pub mod io;
mod norm;
mod ops;
mod rng;
mod tape;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use norm::{Mode, RunningStats, DEFAULT_BN_EPS};
pub use ops::{BinaryKind, UnaryKind};
pub use rng::RngState;
pub use tape::{Tape, Var};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn check_shape(op: &'static str, shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::InvalidShape {
            op,
            detail: format!("extents must be positive and rank >= 1, got {shape:?}"),
        });
    }
    Ok(())
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        check_shape("tensor", &shape)?;
        if numel(&shape) != data.len() {
            return Err(Error::InvalidShape {
                op: "tensor",
                detail: format!(
                    "shape {shape:?} holds {} values, got {}",
                    numel(&shape),
                    data.len()
                ),
            });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let n = numel(&shape);
        Tensor::new(shape, vec![value; n]).expect("full: invalid shape")
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Tensor::full(shape, 0.0)
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Tensor::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::full([1], value)
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        let n = data.len();
        Tensor::new([n], data).expect("from_vec: empty data")
    }

    /// Entries drawn from N(0, 1).
    pub fn randn(shape: impl Into<Vec<usize>>, rng: &mut RngState) -> Self {
        let shape = shape.into();
        let data = (0..numel(&shape)).map(|_| rng.normal()).collect();
        Tensor::new(shape, data).expect("randn: invalid shape")
    }

    /// Entries drawn uniformly from `[lo, hi)`.
    pub fn uniform(shape: impl Into<Vec<usize>>, lo: f64, hi: f64, rng: &mut RngState) -> Self {
        let shape = shape.into();
        let data = (0..numel(&shape))
            .map(|_| lo + (hi - lo) * rng.uniform())
            .collect();
        Tensor::new(shape, data).expect("uniform: invalid shape")
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
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

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, requires_grad: bool) {
        self.requires_grad = requires_grad;
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the stored gradient, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "accumulate_grad",
                lhs: self.shape.clone(),
                rhs: vec![g.len()],
            });
        }
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    /// Same data under a new shape with the same element count.
    pub fn reshaped(&self, shape: impl Into<Vec<usize>>) -> Result<Tensor> {
        let shape = shape.into();
        check_shape("reshape", &shape)?;
        if numel(&shape) != self.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape,
            });
        }
        Tensor::new(shape, self.data.clone())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff: shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}
