//! Batch normalization over the channel axis.
//!
//! Data is viewed as `[N, C, L]`: rank-4 NCHW tensors use `L = H·W`, rank-2
//! `[N, C]` tensors use `L = 1`, and a channel-major `[C, N·L]` buffer is the
//! case `N = 1`.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::parallel;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Whether normalization layers use batch statistics or running estimates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Train,
    Eval,
}

/// Learnable affine parameters and running statistics of one BN layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm<T: Scalar> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::ones(&[channels]),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::ones(&[channels]),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Normalizes `[N, C, L]` data.
    pub fn forward_raw(&self, x: &[T], n: usize, c: usize, l: usize, mode: Mode) -> Result<(Vec<T>, BnCache<T>)> {
        ensure!(c == self.channels(), Dimension, "batch norm over {} channels got {c}", self.channels());
        ensure!(x.len() == n * c * l, Dimension, "buffer of {} elements is not [{n}, {c}, {l}]", x.len());
        let eps = T::lit(BN_EPS);
        let m = n * l;
        let (mean, var) = match mode {
            Mode::Train => {
                let stats = parallel::map_indices(c, |ci| channel_stats(x, n, c, l, ci));
                stats.into_iter().unzip()
            }
            Mode::Eval => (self.running_mean.data().to_vec(), self.running_var.data().to_vec()),
        };
        let inv_std: Vec<T> = var.iter().map(|&v| (v + eps).sqrt().recip()).collect();
        let (g, b) = (self.gamma.data(), self.beta.data());
        let mut xhat = vec![T::zero(); x.len()];
        let mut y = vec![T::zero(); x.len()];
        parallel::for_each_chunk_mut2(&mut xhat, l, &mut y, l, |plane, xh, yo| {
            let ci = plane % c;
            let src = &x[plane * l..(plane + 1) * l];
            for ((h, o), &v) in xh.iter_mut().zip(yo.iter_mut()).zip(src) {
                *h = (v - mean[ci]) * inv_std[ci];
                *o = g[ci] * *h + b[ci];
            }
        });
        let var_unbiased = if m > 1 {
            let f = T::lit(m as f64 / (m - 1) as f64);
            var.iter().map(|&v| v * f).collect()
        } else {
            var.clone()
        };
        let cache = BnCache { dims: (n, c, l), xhat, inv_std, gamma: g.to_vec(), mode, mean, var_unbiased };
        Ok((y, cache))
    }

    /// Normalizes a rank-2 or rank-4 tensor.
    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, BnCache<T>)> {
        let (n, c, l) = ncl(x)?;
        let (y, cache) = self.forward_raw(x.data(), n, c, l, mode)?;
        Ok((Tensor::from_parts(x.shape().to_vec(), y), cache))
    }

    /// Eval-mode normalization in place, with no cache.
    pub fn infer_inplace(&self, x: &mut [T], n: usize, c: usize, l: usize) -> Result<()> {
        ensure!(c == self.channels() && x.len() == n * c * l, Dimension, "batch norm buffer is not [{n}, {c}, {l}]");
        let eps = T::lit(BN_EPS);
        let (g, b) = (self.gamma.data(), self.beta.data());
        let (rm, rv) = (self.running_mean.data(), self.running_var.data());
        parallel::for_each_chunk_mut(x, l, |plane, xs| {
            let ci = plane % c;
            let scale = g[ci] / (rv[ci] + eps).sqrt();
            let shift = b[ci] - rm[ci] * scale;
            xs.iter_mut().for_each(|v| *v = *v * scale + shift);
        });
        Ok(())
    }

    /// Folds a train-mode batch's statistics into the running estimates.
    pub fn update_running(&mut self, cache: &BnCache<T>, momentum: f64) {
        if cache.mode != Mode::Train {
            return;
        }
        let m = T::lit(momentum);
        let keep = T::one() - m;
        for (r, &v) in self.running_mean.data_mut().iter_mut().zip(&cache.mean) {
            *r = keep * *r + m * v;
        }
        for (r, &v) in self.running_var.data_mut().iter_mut().zip(&cache.var_unbiased) {
            *r = keep * *r + m * v;
        }
    }
}

fn ncl<T: Scalar>(x: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [n, c] => Ok((n, c, 1)),
        [n, c, h, w] => Ok((n, c, h * w)),
        _ => Err(crate::Error::Dimension(format!("batch norm needs rank 2 or 4, got {:?}", x.shape()))),
    }
}

/// Biased mean and variance of channel `ci`, accumulated in sample order.
fn channel_stats<T: Scalar>(x: &[T], n: usize, c: usize, l: usize, ci: usize) -> (T, T) {
    let m = T::lit((n * l) as f64);
    let mut sum = T::zero();
    for ni in 0..n {
        sum += x[(ni * c + ci) * l..(ni * c + ci + 1) * l].iter().copied().sum::<T>();
    }
    let mean = sum / m;
    let mut sq = T::zero();
    for ni in 0..n {
        sq += x[(ni * c + ci) * l..(ni * c + ci + 1) * l]
            .iter()
            .map(|&v| (v - mean) * (v - mean))
            .sum::<T>();
    }
    (mean, sq / m)
}

/// Saved state of one batch-norm forward call.
#[derive(Clone, Debug)]
pub struct BnCache<T: Scalar> {
    dims: (usize, usize, usize),
    xhat: Vec<T>,
    inv_std: Vec<T>,
    gamma: Vec<T>,
    mode: Mode,
    mean: Vec<T>,
    var_unbiased: Vec<T>,
}

impl<T: Scalar> BnCache<T> {
    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Per-channel means used for normalization.
    pub fn mean(&self) -> &[T] {
        &self.mean
    }

    /// Per-channel unbiased variances of the batch (train mode).
    pub fn var_unbiased(&self) -> &[T] {
        &self.var_unbiased
    }

    /// Gradients `(dx, dgamma, dbeta)` for `[N, C, L]` data.
    pub fn backward_raw(&self, gy: &[T]) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
        let (n, c, l) = self.dims;
        ensure!(gy.len() == n * c * l, Contract, "gradient of {} elements for batch norm over [{n}, {c}, {l}]", gy.len());
        let sums = parallel::map_indices(c, |ci| {
            let (mut sg, mut sgx) = (T::zero(), T::zero());
            for ni in 0..n {
                let r = (ni * c + ci) * l..(ni * c + ci + 1) * l;
                for (&g, &h) in gy[r.clone()].iter().zip(&self.xhat[r]) {
                    sg += g;
                    sgx += g * h;
                }
            }
            (sg, sgx)
        });
        let (dbeta, dgamma): (Vec<T>, Vec<T>) = sums.iter().copied().unzip();
        let mut dx = vec![T::zero(); gy.len()];
        let m = T::lit((n * l) as f64);
        let train = self.mode == Mode::Train;
        parallel::for_each_chunk_mut(&mut dx, l, |plane, out| {
            let ci = plane % c;
            let k = self.gamma[ci] * self.inv_std[ci];
            let r = plane * l..(plane + 1) * l;
            if train {
                let (sg, sgx) = sums[ci];
                let (mg, mgx) = (sg / m, sgx / m);
                for ((o, &g), &h) in out.iter_mut().zip(&gy[r.clone()]).zip(&self.xhat[r]) {
                    *o = k * (g - mg - h * mgx);
                }
            } else {
                for (o, &g) in out.iter_mut().zip(&gy[r]) {
                    *o = k * g;
                }
            }
        });
        Ok((dx, dgamma, dbeta))
    }

    pub fn backward(&self, gy: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
        let (dx, dg, db) = self.backward_raw(gy.data())?;
        let c = self.dims.1;
        Ok((Tensor::from_parts(gy.shape().to_vec(), dx), Tensor::from_parts(vec![c], dg), Tensor::from_parts(vec![c], db)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn train_mode_output_is_standardized() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f64>::uniform(&[4, 3, 5, 5], -2.0, 3.0, &mut rng);
        let bn = BatchNorm::new(3);
        let (y, _) = bn.forward(&x, Mode::Train).unwrap();
        for ci in 0..3 {
            let vals: Vec<f64> = (0..4).flat_map(|n| y.data()[(n * 3 + ci) * 25..(n * 3 + ci + 1) * 25].to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / 100.0;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 100.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn running_statistics_follow_momentum() {
        let x = Tensor::<f64>::new(vec![4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut bn = BatchNorm::new(1);
        let (_, cache) = bn.forward(&x, Mode::Train).unwrap();
        bn.update_running(&cache, BN_MOMENTUM);
        assert!((bn.running_mean.data()[0] - 0.25).abs() < 1e-12);
        // Unbiased variance of 1..4 is 5/3.
        assert!((bn.running_var.data()[0] - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn eval_mode_is_affine_and_matches_inplace_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut bn = BatchNorm::<f64>::new(2);
        bn.running_mean = Tensor::new(vec![2], vec![0.5, -1.0]).unwrap();
        bn.running_var = Tensor::new(vec![2], vec![2.0, 0.25]).unwrap();
        bn.gamma = Tensor::new(vec![2], vec![1.5, -0.5]).unwrap();
        bn.beta = Tensor::new(vec![2], vec![0.1, 0.2]).unwrap();
        let x = Tensor::uniform(&[3, 2, 2, 2], -1.0, 1.0, &mut rng);
        let (y, _) = bn.forward(&x, Mode::Eval).unwrap();
        let mut z = x.data().to_vec();
        bn.infer_inplace(&mut z, 3, 2, 4).unwrap();
        for (i, (&a, &b)) in y.data().iter().zip(&z).enumerate() {
            assert!((a - b).abs() < 1e-12);
            let ci = (i / 4) % 2;
            let want = bn.gamma.data()[ci] * (x.data()[i] - bn.running_mean.data()[ci])
                / (bn.running_var.data()[ci] + BN_EPS).sqrt()
                + bn.beta.data()[ci];
            assert!((a - want).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f64>::uniform(&[3, 2, 2, 2], -1.0, 1.0, &mut rng);
        let mut bn = BatchNorm::new(2);
        bn.gamma = Tensor::uniform(&[2], 0.5, 1.5, &mut rng);
        let r = Tensor::<f64>::uniform(x.shape(), -1.0, 1.0, &mut rng);
        let loss = |bn: &BatchNorm<f64>, x: &Tensor<f64>| bn.forward(x, Mode::Train).unwrap().0.dot(&r).unwrap();
        let (_, cache) = bn.forward(&x, Mode::Train).unwrap();
        let (dx, dg, db) = cache.backward(&r).unwrap();
        let h = 1e-6;
        for i in 0..x.len() {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp.data_mut()[i] += h;
            xm.data_mut()[i] -= h;
            let fd = (loss(&bn, &xp) - loss(&bn, &xm)) / (2.0 * h);
            assert!((fd - dx.data()[i]).abs() < 1e-7, "dx[{i}]: {fd} vs {}", dx.data()[i]);
        }
        for ci in 0..2 {
            let (mut bp, mut bm) = (bn.clone(), bn.clone());
            bp.gamma.data_mut()[ci] += h;
            bm.gamma.data_mut()[ci] -= h;
            let fd = (loss(&bp, &x) - loss(&bm, &x)) / (2.0 * h);
            assert!((fd - dg.data()[ci]).abs() < 1e-7);
            let (mut bp, mut bm) = (bn.clone(), bn.clone());
            bp.beta.data_mut()[ci] += h;
            bm.beta.data_mut()[ci] -= h;
            let fd = (loss(&bp, &x) - loss(&bm, &x)) / (2.0 * h);
            assert!((fd - db.data()[ci]).abs() < 1e-7);
        }
    }

    #[test]
    fn channel_major_view_equals_nchw() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::<f64>::uniform(&[3, 2, 2, 2], -1.0, 1.0, &mut rng);
        let bn = BatchNorm::new(2);
        let (y, _) = bn.forward(&x, Mode::Train).unwrap();
        let cm = crate::tensor::nchw_to_cm(x.data(), 3, 2, 4);
        let (ycm, _) = bn.forward_raw(&cm, 1, 2, 12, Mode::Train).unwrap();
        let back = crate::tensor::cm_to_nchw(&ycm, 3, 2, 4);
        for (a, b) in y.data().iter().zip(&back) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
