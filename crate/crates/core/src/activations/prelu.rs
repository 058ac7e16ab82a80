use crate::activations::counter::OpCounter;
use crate::activations::PlaneActivation;
use crate::error::{ensure, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const PRELU_INIT: f64 = 0.25;

/// `y = x` for `x > 0`, `a_c·x` otherwise, with one slope per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct PRelu<T: Scalar> {
    pub slope: Tensor<T>,
}

impl<T: Scalar> PRelu<T> {
    pub fn new(channels: usize) -> Self {
        Self { slope: Tensor::full(&[channels], T::lit(PRELU_INIT)) }
    }

    pub fn from_slopes(slope: Tensor<T>) -> Result<Self> {
        ensure!(slope.ndim() == 1, Config, "PReLU slopes must be rank 1, got {:?}", slope.shape());
        Ok(Self { slope })
    }
}

impl<T: Scalar> PlaneActivation<T> for PRelu<T> {
    fn channels(&self) -> usize {
        self.slope.len()
    }

    fn grad_width(&self) -> usize {
        1
    }

    fn forward_plane<C: OpCounter>(&self, c: usize, x: &[T], y: &mut [T], counter: &C) {
        let a = self.slope.data()[c];
        for (o, &v) in y.iter_mut().zip(x) {
            *o = if v > T::zero() { v } else { a * v };
        }
        counter.add(x.len() as u64);
    }

    fn input_grad_plane(&self, c: usize, x: &[T], gy: &[T], gx: &mut [T]) {
        let a = self.slope.data()[c];
        for ((o, &v), &g) in gx.iter_mut().zip(x).zip(gy) {
            *o = if v > T::zero() { g } else { a * g };
        }
    }

    fn param_grad_plane(&self, _c: usize, x: &[T], gy: &[T], acc: &mut [T]) {
        acc[0] += x.iter().zip(gy).filter(|(&v, _)| v <= T::zero()).map(|(&v, &g)| v * g).sum::<T>();
    }
}
