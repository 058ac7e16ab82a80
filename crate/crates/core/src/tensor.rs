//! Dense row-major tensor.

use rand::Rng;

use crate::error::{ensure, Error, Result};
use crate::scalar::Scalar;

/// Dense N-dimensional array with an explicit shape.
///
/// Invariants: every extent is at least 1 and `data.len()` equals the product
/// of the extents.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f64> {
    shape: Vec<usize>,
    data: Vec<T>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        ensure!(
            shape.iter().all(|&d| d >= 1),
            Dimension,
            "shape {shape:?} has a zero extent"
        );
        ensure!(
            numel(&shape) == data.len(),
            Dimension,
            "shape {shape:?} needs {} elements, got {}",
            numel(&shape),
            data.len()
        );
        Ok(Self { shape, data })
    }

    /// Builds a tensor whose shape is known to be valid.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        assert!(shape.iter().all(|&d| d >= 1), "shape {shape:?} has a zero extent");
        Self { shape: shape.to_vec(), data: vec![value; numel(shape)] }
    }

    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> T) -> Self {
        assert!(shape.iter().all(|&d| d >= 1), "shape {shape:?} has a zero extent");
        Self { shape: shape.to_vec(), data: (0..numel(shape)).map(f).collect() }
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| T::lit(rng.gen_range(lo..hi)))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// `(N, C, H, W)` of a rank-4 tensor.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match *self.shape.as_slice() {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::Dimension(format!("expected a rank-4 NCHW tensor, got shape {:?}", self.shape))),
        }
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match *self.shape.as_slice() {
            [r, c] => Ok((r, c)),
            _ => Err(Error::Dimension(format!("expected a rank-2 tensor, got shape {:?}", self.shape))),
        }
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        ensure!(
            numel(shape) == self.data.len() && shape.iter().all(|&d| d >= 1),
            Dimension,
            "cannot reshape {:?} into {shape:?}",
            self.shape
        );
        Ok(Self { shape: shape.to_vec(), data: self.data })
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        let nd = self.ndim();
        let mut seen = vec![false; nd];
        ensure!(perm.len() == nd, Dimension, "permutation {perm:?} for rank {nd}");
        for &p in perm {
            ensure!(p < nd && !seen[p], Dimension, "invalid permutation {perm:?}");
            seen[p] = true;
        }
        let in_strides = strides(&self.shape);
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let mut out = Vec::with_capacity(self.len());
        let mut idx = vec![0usize; nd];
        for _ in 0..self.len() {
            let off: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
            out.push(self.data[off]);
            for ax in (0..nd).rev() {
                idx[ax] += 1;
                if idx[ax] < out_shape[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        Ok(Self { shape: out_shape, data: out })
    }

    /// Swaps two axes.
    pub fn transpose(&self, a: usize, b: usize) -> Result<Self> {
        let mut perm: Vec<usize> = (0..self.ndim()).collect();
        ensure!(a < perm.len() && b < perm.len(), Dimension, "axes ({a}, {b}) out of range");
        perm.swap(a, b);
        self.permute(&perm)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        ensure!(
            self.shape == other.shape,
            Dimension,
            "shape mismatch {:?} vs {:?}",
            self.shape,
            other.shape
        );
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    /// Inner product of the flattened data.
    pub fn dot(&self, other: &Self) -> Result<T> {
        ensure!(self.shape == other.shape, Dimension, "shape mismatch {:?} vs {:?}", self.shape, other.shape);
        Ok(self.data.iter().zip(&other.data).map(|(&a, &b)| a * b).sum())
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max)
    }

    pub fn norm(&self) -> T {
        self.data.iter().map(|&v| v * v).sum::<T>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Converts the element type.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| U::lit(v.as_f64())).collect() }
    }

    pub fn fill(&mut self, value: T) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: T, other: &Self) -> Result<()> {
        ensure!(self.shape == other.shape, Dimension, "shape mismatch {:?} vs {:?}", self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }
}

/// Row-major strides of `shape`.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// `[N, C, L]` (NCHW flattened) to channel-major `[C, N·L]`.
pub(crate) fn nchw_to_cm<T: Scalar>(data: &[T], n: usize, c: usize, l: usize) -> Vec<T> {
    let mut out = vec![T::zero(); data.len()];
    for ni in 0..n {
        for ci in 0..c {
            let src = &data[(ni * c + ci) * l..(ni * c + ci + 1) * l];
            out[ci * n * l + ni * l..ci * n * l + (ni + 1) * l].copy_from_slice(src);
        }
    }
    out
}

/// Channel-major `[C, N·L]` back to `[N, C, L]`.
pub(crate) fn cm_to_nchw<T: Scalar>(data: &[T], n: usize, c: usize, l: usize) -> Vec<T> {
    let mut out = vec![T::zero(); data.len()];
    for ci in 0..c {
        for ni in 0..n {
            let src = &data[ci * n * l + ni * l..ci * n * l + (ni + 1) * l];
            out[(ni * c + ci) * l..(ni * c + ci + 1) * l].copy_from_slice(src);
        }
    }
    out
}
