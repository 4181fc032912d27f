//! Dense row-major tensors.
//!
//! Activations are rank 4 (`N × C × H × W`); per-sample matrices on the SPD
//! path are rank 3 (`N × d × d`); losses are rank 0.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::linalg::Mat;
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != data.len() {
            bail!(Dimension, "shape {:?} needs {} values, got {}", shape, len, data.len());
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![v; shape.iter().product()] }
    }

    pub fn scalar(v: T) -> Self {
        Tensor { shape: Vec::new(), data: vec![v] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: (0..n).map(&mut f).collect() }
    }

    /// Packs `mats` (all `d×d`) into an `N × d × d` tensor.
    pub fn from_mats(mats: &[Mat]) -> Result<Self> {
        let Some(first) = mats.first() else {
            bail!(InvalidInput, "no matrices to pack");
        };
        let (r, c) = (first.rows(), first.cols());
        let mut data = Vec::with_capacity(mats.len() * r * c);
        for m in mats {
            if (m.rows(), m.cols()) != (r, c) {
                bail!(Dimension, "matrices of different shapes in one batch");
            }
            data.extend(m.as_slice().iter().map(|&v| T::of(v)));
        }
        Tensor::new(&[mats.len(), r, c], data)
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

    /// `(N, C, H, W)`; errors unless rank 4.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match *self.shape.as_slice() {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => bail!(Dimension, "expected a rank-4 tensor, got shape {:?}", self.shape),
        }
    }

    /// `(N, d)` for a stack of square matrices.
    pub fn dims_mats(&self) -> Result<(usize, usize)> {
        match *self.shape.as_slice() {
            [n, r, c] if r == c => Ok((n, r)),
            _ => bail!(Dimension, "expected N×d×d matrices, got shape {:?}", self.shape),
        }
    }

    pub fn mat(&self, i: usize) -> Mat {
        let (r, c) = (self.shape[1], self.shape[2]);
        let s = &self.data[i * r * c..(i + 1) * r * c];
        Mat::from_vec(r, c, s.iter().map(|v| v.f64()).collect()).expect("slice sized above")
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            bail!(Dimension, "cannot reshape {:?} to {:?}", self.shape, shape);
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Sample `i` of a batched tensor as a standalone tensor with `N = 1`.
    pub fn sample(&self, i: usize) -> Self {
        let per = self.data.len() / self.shape[0];
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Tensor { shape, data: self.data[i * per..(i + 1) * per].to_vec() }
    }

    /// Stacks rank-`r` tensors along the leading axis.
    pub fn stack(parts: &[Tensor<T>]) -> Result<Self> {
        let Some(first) = parts.first() else {
            bail!(InvalidInput, "nothing to stack");
        };
        let tail = &first.shape[1..];
        let mut data = Vec::new();
        let mut n = 0;
        for p in parts {
            if &p.shape[1..] != tail {
                bail!(Dimension, "cannot stack {:?} with {:?}", p.shape, first.shape);
            }
            n += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = n;
        Tensor::new(&shape, data)
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| U::of(v.f64())).collect() }
    }

    pub fn dot(&self, other: &Self) -> T {
        self.data.iter().zip(&other.data).map(|(&a, &b)| a * b).sum()
    }
}
