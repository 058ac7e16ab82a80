//! Per-channel spline activation `y = Σ_j c_j·B_{j,k}(x)` on a uniform grid.
//!
//! The knot vector extends the grid by `k` knots on each side, so every point
//! of `[−r, r]` is covered by exactly `k + 1` non-zero bases. Inputs outside
//! the range are clamped, which makes the map constant (and its input
//! gradient zero) beyond the edges. Coefficients start at the Greville
//! abscissae, so a fresh spline is the identity on `[−r, r]`.

use serde::{Deserialize, Serialize};

use crate::activations::counter::OpCounter;
use crate::activations::PlaneActivation;
use crate::error::{ensure, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Grid shape of a spline activation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplineGrid {
    pub order: usize,
    pub intervals: usize,
    pub range: f64,
}

impl Default for SplineGrid {
    fn default() -> Self {
        Self { order: 3, intervals: 8, range: 4.0 }
    }
}

impl SplineGrid {
    pub fn bases(&self) -> usize {
        self.intervals + self.order
    }

    fn validate(&self) -> Result<()> {
        ensure!(
            (1..=7).contains(&self.order) && self.intervals >= 1 && self.range > 0.0 && self.range.is_finite(),
            Config,
            "invalid spline grid {self:?}"
        );
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BSpline<T: Scalar> {
    grid: SplineGrid,
    knots: Vec<T>,
    /// Control coefficients, `[C, intervals + order]`.
    pub coeffs: Tensor<T>,
}

impl<T: Scalar> BSpline<T> {
    pub fn new(channels: usize, grid: SplineGrid) -> Result<Self> {
        grid.validate()?;
        let knots = Self::knot_vector(&grid);
        let k = grid.order;
        let greville: Vec<T> = (0..grid.bases())
            .map(|j| knots[j + 1..=j + k].iter().copied().sum::<T>() / T::lit(k as f64))
            .collect();
        let coeffs = Tensor::from_fn(&[channels, grid.bases()], |i| greville[i % grid.bases()]);
        Ok(Self { grid, knots, coeffs })
    }

    pub fn from_coeffs(grid: SplineGrid, coeffs: Tensor<T>) -> Result<Self> {
        grid.validate()?;
        let (_, w) = coeffs.dims2()?;
        ensure!(w == grid.bases(), Config, "{grid:?} needs {} coefficients per channel, got {w}", grid.bases());
        Ok(Self { knots: Self::knot_vector(&grid), grid, coeffs })
    }

    fn knot_vector(grid: &SplineGrid) -> Vec<T> {
        let h = 2.0 * grid.range / grid.intervals as f64;
        (0..=grid.intervals + 2 * grid.order)
            .map(|j| T::lit(-grid.range + (j as f64 - grid.order as f64) * h))
            .collect()
    }

    pub fn grid(&self) -> &SplineGrid {
        &self.grid
    }

    /// Knot span `i` with `t_i ≤ x < t_{i+1}` for clamped `x`, and the clamped value.
    #[inline]
    fn span(&self, x: T) -> (usize, T) {
        let k = self.grid.order;
        let r = T::lit(self.grid.range);
        let xc = x.max(-r).min(r);
        let h = T::lit(2.0 * self.grid.range / self.grid.intervals as f64);
        let cell = ((xc + r) / h).floor().to_usize().unwrap_or(0).min(self.grid.intervals - 1);
        (cell + k, xc)
    }

    /// Non-zero bases `B_{i−k..=i}` at `x` (Cox–de Boor triangle), plus the
    /// degree `k − 1` bases `B_{i−k+1..=i}` when `lower` is given.
    #[inline]
    fn basis<C: OpCounter>(&self, i: usize, x: T, n: &mut [T], lower: Option<&mut [T]>, counter: &C) {
        let k = self.grid.order;
        let t = &self.knots;
        let mut left = [T::zero(); 8];
        let mut right = [T::zero(); 8];
        n[0] = T::one();
        let mut lower = lower;
        for j in 1..=k {
            if j == k {
                if let Some(low) = lower.as_deref_mut() {
                    low[..k].copy_from_slice(&n[..k]);
                }
            }
            left[j] = x - t[i + 1 - j];
            right[j] = t[i + j] - x;
            let mut saved = T::zero();
            for r in 0..j {
                let tmp = n[r] / (right[r + 1] + left[j - r]);
                n[r] = saved + right[r + 1] * tmp;
                saved = left[j - r] * tmp;
            }
            n[j] = saved;
        }
        counter.add((k * (k + 1) / 2) as u64);
    }

    /// Scalar evaluation for channel `c`.
    pub fn eval(&self, c: usize, x: T) -> T {
        let mut y = [T::zero()];
        self.forward_plane(c, &[x], &mut y, &crate::activations::NoCount);
        y[0]
    }

    /// Values of all bases at `x`.
    pub fn basis_values(&self, x: T) -> Vec<T> {
        let k = self.grid.order;
        let (i, xc) = self.span(x);
        let mut n = [T::zero(); 8];
        self.basis(i, xc, &mut n, None, &crate::activations::NoCount);
        let mut all = vec![T::zero(); self.grid.bases()];
        all[i - k..=i].copy_from_slice(&n[..=k]);
        all
    }
}

impl<T: Scalar> PlaneActivation<T> for BSpline<T> {
    fn channels(&self) -> usize {
        self.coeffs.shape()[0]
    }

    fn grad_width(&self) -> usize {
        self.grid.bases()
    }

    fn forward_plane<C: OpCounter>(&self, c: usize, x: &[T], y: &mut [T], counter: &C) {
        let k = self.grid.order;
        let nb = self.grid.bases();
        let coef = &self.coeffs.data()[c * nb..(c + 1) * nb];
        let mut n = [T::zero(); 8];
        for (o, &v) in y.iter_mut().zip(x) {
            let (i, xc) = self.span(v);
            self.basis(i, xc, &mut n, None, counter);
            *o = (0..=k).map(|r| coef[i - k + r] * n[r]).sum();
        }
    }

    fn input_grad_plane(&self, c: usize, x: &[T], gy: &[T], gx: &mut [T]) {
        let k = self.grid.order;
        let nb = self.grid.bases();
        let coef = &self.coeffs.data()[c * nb..(c + 1) * nb];
        let t = &self.knots;
        let r = T::lit(self.grid.range);
        let kf = T::lit(k as f64);
        let mut n = [T::zero(); 8];
        let mut low = [T::zero(); 8];
        for ((o, &v), &g) in gx.iter_mut().zip(x).zip(gy) {
            if v < -r || v > r {
                *o = T::zero();
                continue;
            }
            let (i, xc) = self.span(v);
            self.basis(i, xc, &mut n, Some(&mut low), &crate::activations::NoCount);
            // B'_{j,k} = k·(B_{j,k−1}/(t_{j+k} − t_j) − B_{j+1,k−1}/(t_{j+k+1} − t_{j+1}))
            let mut d = T::zero();
            for rr in 0..=k {
                let j = i - k + rr;
                let a = if rr > 0 { low[rr - 1] / (t[j + k] - t[j]) } else { T::zero() };
                let b = if rr < k { low[rr] / (t[j + k + 1] - t[j + 1]) } else { T::zero() };
                d += coef[j] * kf * (a - b);
            }
            *o = g * d;
        }
    }

    fn param_grad_plane(&self, _c: usize, x: &[T], gy: &[T], acc: &mut [T]) {
        let k = self.grid.order;
        let mut n = [T::zero(); 8];
        for (&v, &g) in x.iter().zip(gy) {
            let (i, xc) = self.span(v);
            self.basis(i, xc, &mut n, None, &crate::activations::NoCount);
            for rr in 0..=k {
                acc[i - k + rr] += g * n[rr];
            }
        }
    }
}
