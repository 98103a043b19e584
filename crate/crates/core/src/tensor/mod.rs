//! Dense tensors, a reverse-mode tape, Adam and a small Jacobi SVD.
//!
//! Everything is generic over [`Real`] so the same model code runs in
//! `f32` for training and in `f64` when checking gradients.

mod adam;
mod kernels;
mod svd;
mod tape;

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

pub use adam::{adam_step, AdamConfig, AdamState};
pub use svd::{svd_small, Svd, SVD_MAX_SWEEPS, SVD_TOLERANCE};
pub use tape::{Tape, Var};

/// Floating point element type of a tensor.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Sum + Debug + Display + Default + Send + Sync + 'static
{
    fn lit(v: f64) -> Self;

    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn lit(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn lit(v: f64) -> Self {
        v
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Row-major dense array with an optional gradient slot.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F = f32> {
    shape: Vec<usize>,
    data: Vec<F>,
    requires_grad: bool,
    grad: Option<Vec<F>>,
}

impl<F: Real> Tensor<F> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<F>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().any(|&d| d == 0) || shape.iter().product::<usize>() != data.len() {
            return Err(Error::shape("tensor", &shape, &[data.len()]));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor::new(shape, vec![F::zero(); n]).expect("zero-sized extent")
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: F) -> Self {
        let mut t = Self::zeros(shape);
        t.data.iter_mut().for_each(|x| *x = value);
        t
    }

    pub fn scalar(value: F) -> Self {
        Tensor::new([1], vec![value]).unwrap()
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros([n, n]);
        for i in 0..n {
            t.data[i * n + i] = F::one();
        }
        t
    }

    /// Builds a matrix from nested rows; all rows must share a length.
    pub fn from_rows(rows: &[Vec<F>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Contract("ragged rows".into()));
        }
        Tensor::new([rows.len(), cols], rows.concat())
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[F]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<F>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::shape("set_grad", &self.shape, &[grad.len()]));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, &shape));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Element at a multi-index.
    pub fn at(&self, index: &[usize]) -> F {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        let mut flat = 0;
        for (&i, &d) in index.iter().zip(&self.shape) {
            assert!(i < d, "index {index:?} out of bounds for {:?}", self.shape);
            flat = flat * d + i;
        }
        self.data[flat]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| G::lit(x.as_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: self
                .grad
                .as_ref()
                .map(|g| g.iter().map(|&x| G::lit(x.as_f64())).collect()),
        }
    }

    /// Matrix transpose of a rank-2 tensor.
    pub fn transpose(&self) -> Result<Self> {
        let (m, n) = self.dims2("transpose")?;
        let mut out = vec![F::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor::new([n, m], out)
    }

    /// Plain (untracked) matrix product.
    pub fn matmul(&self, rhs: &Tensor<F>) -> Result<Self> {
        let (m, k) = self.dims2("matmul")?;
        let (k2, n) = rhs.dims2("matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", &self.shape, &rhs.shape));
        }
        let mut out = vec![F::zero(); m * n];
        kernels::gemm_nn(&self.data, &rhs.data, &mut out, m, k, n);
        Tensor::new([m, n], out)
    }

    /// Frobenius norm.
    pub fn norm(&self) -> F {
        self.data.iter().map(|&x| x * x).sum::<F>().sqrt()
    }

    pub fn sub(&self, rhs: &Tensor<F>) -> Result<Self> {
        if self.shape != rhs.shape {
            return Err(Error::shape("sub", &self.shape, &rhs.shape));
        }
        let data = self.data.iter().zip(&rhs.data).map(|(&a, &b)| a - b).collect();
        Tensor::new(self.shape.clone(), data)
    }

    pub(crate) fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [m, n] => Ok((m, n)),
            _ => Err(Error::shape(op, &self.shape, &[])),
        }
    }
}
