//! Flat row-major 2-D tensor.
//!
//! Scalars are [1, 1], row vectors [1, m]. Buffer length always equals
//! rows * cols; constructors enforce it.

use ndarray::{ArrayView2, ArrayViewMut2};
use rand::Rng;
use rand_distr::StandardNormal;

use super::Real;
use crate::error::{Result, SefError};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<Real>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: Real) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn scalar(value: Real) -> Self {
        Tensor {
            rows: 1,
            cols: 1,
            data: vec![value],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<Real>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(SefError::shape(
                "Tensor::from_vec",
                format!("{rows}x{cols} ({} elements)", rows * cols),
                format!("{} elements", data.len()),
            ));
        }
        Ok(Tensor { rows, cols, data })
    }

    /// Identity matrix, used by near-identity projection init.
    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn shape_str(&self) -> String {
        format!("{}x{}", self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[Real] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Real] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> Real {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: Real) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j] = v;
    }

    /// Value of a [1, 1] tensor.
    pub fn item(&self) -> Result<Real> {
        if self.rows != 1 || self.cols != 1 {
            return Err(SefError::shape("Tensor::item", "1x1", self.shape_str()));
        }
        Ok(self.data[0])
    }

    pub fn view(&self) -> ArrayView2<'_, Real> {
        ArrayView2::from_shape((self.rows, self.cols), &self.data)
            .expect("buffer length matches shape by construction")
    }

    pub fn view_mut(&mut self) -> ArrayViewMut2<'_, Real> {
        ArrayViewMut2::from_shape((self.rows, self.cols), &mut self.data)
            .expect("buffer length matches shape by construction")
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Extract one row as a [1, cols] tensor.
    pub fn row(&self, i: usize) -> Tensor {
        debug_assert!(i < self.rows);
        let start = i * self.cols;
        Tensor {
            rows: 1,
            cols: self.cols,
            data: self.data[start..start + self.cols].to_vec(),
        }
    }

    pub fn fill(&mut self, v: Real) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn map(&self, f: impl Fn(Real) -> Real) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }
}

/// Gaussian-initialized tensor with entries scale * N(0, 1).
pub fn randn<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, scale: Real) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            scale * (z as Real)
        })
        .collect();
    Tensor { rows, cols, data }
}
