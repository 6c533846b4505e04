//! Dense row-major `f64` tensors.
//!
//! Shapes are immutable after construction; every operation returns a new
//! value. All arithmetic is 64-bit throughout (the gradient-check tolerances
//! in this crate assume a 52-bit mantissa). Binary elementwise operations
//! require exactly equal shapes, except that a single-element tensor may
//! stand in for a scalar on either side; there is no general broadcasting.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::Error;
use crate::Result;

/// An n-dimensional array of `f64` with row-major layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking that `product(shape) == data.len()` and
    /// that every extent is positive.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::invalid("tensor", "extents must be positive"));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::invalid(
                "tensor",
                alloc::format!(
                    "shape {:?} implies {} elements but {} were given",
                    shape,
                    numel,
                    data.len()
                ),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    /// Single-element tensor of shape `[1]`.
    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Identity matrix of extent `n`.
    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(Error::invalid(
                "item",
                alloc::format!("tensor of shape {:?} is not a scalar", self.shape),
            ))
        }
    }

    /// New view with a different shape over the same data length.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    pub fn iter(&self) -> core::slice::Iter<'_, f64> {
        self.data.iter()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    fn zip_with(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape == other.shape {
            let data = self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect();
            Ok(Tensor {
                shape: self.shape.clone(),
                data,
            })
        } else if other.is_scalar() {
            let s = other.data[0];
            Ok(self.map(|x| f(x, s)))
        } else if self.is_scalar() {
            let s = self.data[0];
            Ok(other.map(|x| f(s, x)))
        } else {
            Err(Error::ShapeMismatch {
                op,
                left: self.shape.clone(),
                right: other.shape.clone(),
            })
        }
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|x| x * c)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        self.map(|x| x + c)
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = match self.shape[..] {
            [m, k] => (m, k),
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "matmul",
                    left: self.shape.clone(),
                    right: other.shape.clone(),
                })
            }
        };
        let (k2, n) = match other.shape[..] {
            [k2, n] => (k2, n),
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "matmul",
                    left: self.shape.clone(),
                    right: other.shape.clone(),
                })
            }
        };
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        // i-p-j ordering keeps both operands streaming row-major.
        for i in 0..m {
            let arow = &self.data[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for (p, &a) in arow.iter().enumerate() {
                let brow = &other.data[p * n..(p + 1) * n];
                for (o, &b) in orow.iter_mut().zip(brow.iter()) {
                    *o += a * b;
                }
            }
        }
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose2(&self) -> Result<Tensor> {
        let (m, n) = match self.shape[..] {
            [m, n] => (m, n),
            _ => {
                return Err(Error::invalid(
                    "transpose",
                    alloc::format!("expected rank 2, got shape {:?}", self.shape),
                ))
            }
        };
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor {
            shape: vec![n, m],
            data: out,
        })
    }

    /// Sum or mean over the given axes (removed from the output shape).
    /// Reducing over every axis yields shape `[1]`.
    pub fn reduce(&self, axes: &[usize], mean: bool) -> Result<Tensor> {
        let rank = self.shape.len();
        if axes.is_empty() {
            return Err(Error::invalid("reduce", "no axes given"));
        }
        let mut seen = vec![false; rank];
        for &a in axes {
            if a >= rank {
                return Err(Error::invalid(
                    "reduce",
                    alloc::format!("axis {} out of range for rank {}", a, rank),
                ));
            }
            if seen[a] {
                return Err(Error::invalid("reduce", alloc::format!("axis {} repeated", a)));
            }
            seen[a] = true;
        }
        let out_shape: Vec<usize> = (0..rank).filter(|i| !seen[*i]).map(|i| self.shape[i]).collect();
        let out_shape = if out_shape.is_empty() { vec![1] } else { out_shape };
        let out_numel: usize = out_shape.iter().product();
        let mut out = vec![0.0; out_numel];

        // Row-major strides of the input and of the kept axes within the output.
        let mut in_strides = vec![1usize; rank];
        for i in (0..rank.saturating_sub(1)).rev() {
            in_strides[i] = in_strides[i + 1] * self.shape[i + 1];
        }
        let kept: Vec<usize> = (0..rank).filter(|i| !seen[*i]).collect();
        let mut out_strides = vec![0usize; rank];
        let mut acc = 1usize;
        for &i in kept.iter().rev() {
            out_strides[i] = acc;
            acc *= self.shape[i];
        }

        let mut idx = vec![0usize; rank];
        for (flat, &v) in self.data.iter().enumerate() {
            let mut rem = flat;
            let mut out_flat = 0usize;
            for d in 0..rank {
                idx[d] = rem / in_strides[d];
                rem %= in_strides[d];
                if !seen[d] {
                    out_flat += idx[d] * out_strides[d];
                }
            }
            out[out_flat] += v;
        }
        if mean {
            let count: usize = (0..rank).filter(|i| seen[*i]).map(|i| self.shape[i]).product();
            let inv = 1.0 / count as f64;
            for o in out.iter_mut() {
                *o *= inv;
            }
        }
        Ok(Tensor {
            shape: out_shape,
            data: out,
        })
    }
}
