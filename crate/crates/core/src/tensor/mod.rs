//! Dense `f32` tensors and the two kernels every convolution is lowered to:
//! [`gemm`] and [`im2col`].
//!
//! Tensors are row-major with the last axis fastest. Image-shaped tensors use
//! NCHW order (batch, channels, height, width).

mod gemm;
mod im2col;

use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};

pub use gemm::gemm;
pub(crate) use gemm::{sgemm, Bias};
pub use im2col::{im2col, ConvGeometry};
pub(crate) use im2col::im2col_into;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f32>) -> Result<Self> {
        let shape = shape.into();
        check_shape(&shape)?;
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} holds {} values but {} were supplied",
                shape,
                len,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    /// Panics if any dimension is zero or the shape is empty.
    pub fn full(shape: impl Into<Vec<usize>>, value: f32) -> Self {
        let shape = shape.into();
        check_shape(&shape).expect("invalid tensor shape");
        let len = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; len],
        }
    }

    /// Builds a tensor by evaluating `f` at every flat (row-major) index.
    pub fn from_fn(shape: impl Into<Vec<usize>>, f: impl FnMut(usize) -> f32) -> Self {
        let shape = shape.into();
        check_shape(&shape).expect("invalid tensor shape");
        let len: usize = shape.iter().product();
        Tensor {
            shape,
            data: (0..len).map(f).collect(),
        }
    }

    /// Samples every element from `N(0, std²)`.
    pub fn randn<R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, std: f32, rng: &mut R) -> Self {
        let normal = Normal::new(0.0f32, std).expect("std must be finite and non-negative");
        let mut t = Self::zeros(shape);
        t.data.iter_mut().for_each(|v| *v = normal.sample(rng));
        t
    }

    /// Samples every element uniformly from `[lo, hi)`.
    pub fn rand_uniform<R: Rng + ?Sized>(
        shape: impl Into<Vec<usize>>,
        lo: f32,
        hi: f32,
        rng: &mut R,
    ) -> Self {
        let dist = Uniform::new(lo, hi).expect("empty uniform range");
        let mut t = Self::zeros(shape);
        t.data.iter_mut().for_each(|v| *v = dist.sample(rng));
        t
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

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Tensor::new(shape, self.data)
    }

    /// Interprets the tensor as NCHW.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match *self.shape.as_slice() {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::shape(format!(
                "expected a 4-D NCHW tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match *self.shape.as_slice() {
            [r, c] => Ok((r, c)),
            _ => Err(Error::shape(format!(
                "expected a matrix, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "elementwise operands differ: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn transpose2(&self) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::new([c, r], out)
    }

    /// Slices item `index` out of the leading (batch) axis, keeping rank.
    pub fn batch_item(&self, index: usize) -> Result<Tensor> {
        let n = self.shape[0];
        if index >= n {
            return Err(Error::shape(format!(
                "batch index {index} out of range for shape {:?}",
                self.shape
            )));
        }
        let stride = self.data.len() / n;
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Tensor::new(shape, self.data[index * stride..(index + 1) * stride].to_vec())
    }

    /// Concatenates tensors along the leading axis; trailing dims must agree.
    pub fn stack_batch(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::shape("cannot stack an empty list"))?;
        let tail = &first.shape[1..];
        let mut data = Vec::with_capacity(items.iter().map(Tensor::len).sum());
        let mut n = 0;
        for t in items {
            if &t.shape[1..] != tail {
                return Err(Error::shape(format!(
                    "cannot stack {:?} with {:?}",
                    first.shape, t.shape
                )));
            }
            n += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = n;
        Tensor::new(shape, data)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on mismatched shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const PREVIEW: usize = 8;
        write!(f, "Tensor{:?} ", self.shape)?;
        let head = &self.data[..self.data.len().min(PREVIEW)];
        if self.data.len() > PREVIEW {
            write!(f, "{head:?}..")
        } else {
            write!(f, "{head:?}")
        }
    }
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() {
        return Err(Error::shape("tensors must have rank >= 1"));
    }
    if shape.contains(&0) {
        return Err(Error::shape(format!(
            "shape {shape:?} has a zero-sized dimension"
        )));
    }
    Ok(())
}
