//! Grid Linear: a continuous piecewise-linear map with fixed knots and
//! learnable slopes and intercept.
//!
//! With knots `g_1 < … < g_m` and slopes `α_1 … α_{m+1}`:
//!
//! ```text
//! x ≤ g_1:            y = β + α_1·x
//! g_{i-1} < x ≤ g_i:  y = y(g_{i-1}) + α_i·(x − g_{i-1})
//! x > g_m:            y = y(g_m) + α_{m+1}·(x − g_m)
//! ```
//!
//! Intervals are closed on the right, so at a knot the left slope applies.
//! Each segment starts from the previous segment's endpoint, which makes the
//! map continuous by construction.

use crate::activations::counter::OpCounter;
use crate::activations::PlaneActivation;
use crate::error::{ensure, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per-channel GLinear parameters sharing one fixed grid.
#[derive(Clone, Debug, PartialEq)]
pub struct GLinear<T: Scalar> {
    grid: Vec<T>,
    /// Slopes, `[C, m + 1]`.
    pub alphas: Tensor<T>,
    /// Intercepts, `[C]`.
    pub beta: Tensor<T>,
}

impl<T: Scalar> GLinear<T> {
    /// Identity-initialized (`β = 0`, all `α = 1`) activation over `grid`.
    pub fn new(channels: usize, grid: &[f64]) -> Result<Self> {
        let grid: Vec<T> = grid.iter().map(|&g| T::lit(g)).collect();
        Self::check_grid(&grid)?;
        ensure!(channels >= 1, Config, "GLinear needs at least one channel");
        Ok(Self {
            alphas: Tensor::ones(&[channels, grid.len() + 1]),
            beta: Tensor::zeros(&[channels]),
            grid,
        })
    }

    /// `intervals` segments: `intervals − 1` knots spaced 1 apart and centred on 0.
    ///
    /// Two intervals give the default single knot at 0.
    pub fn with_intervals(channels: usize, intervals: usize) -> Result<Self> {
        ensure!(intervals >= 1, Config, "GLinear needs at least one interval");
        let m = intervals - 1;
        let grid: Vec<f64> = (0..m).map(|i| i as f64 - (m as f64 - 1.0) / 2.0).collect();
        Self::new(channels, &grid)
    }

    pub fn from_params(grid: &[f64], alphas: Tensor<T>, beta: Tensor<T>) -> Result<Self> {
        let grid: Vec<T> = grid.iter().map(|&g| T::lit(g)).collect();
        Self::check_grid(&grid)?;
        let (c, w) = alphas.dims2()?;
        ensure!(w == grid.len() + 1, Config, "{} knots need {} slopes, got {w}", grid.len(), grid.len() + 1);
        ensure!(beta.shape() == [c], Config, "intercepts shape {:?} != [{c}]", beta.shape());
        Ok(Self { grid, alphas, beta })
    }

    fn check_grid(grid: &[T]) -> Result<()> {
        ensure!(
            grid.windows(2).all(|w| w[0] < w[1]) && grid.iter().all(|g| g.is_finite()),
            Config,
            "GLinear grid must be finite and strictly increasing: {grid:?}"
        );
        Ok(())
    }

    pub fn grid(&self) -> &[T] {
        &self.grid
    }

    pub fn knots(&self) -> usize {
        self.grid.len()
    }

    pub fn param_count(&self) -> usize {
        self.alphas.len() + self.beta.len()
    }

    /// Segment index: the number of knots strictly below `x`.
    #[inline]
    pub fn segment(&self, x: T) -> usize {
        self.grid.partition_point(|&g| g < x)
    }

    /// Endpoint values `V_i = y(g_{i+1})` of channel `c`.
    fn endpoints(&self, c: usize) -> Vec<T> {
        let a = self.slopes(c);
        let beta = self.beta.data()[c];
        let mut v = Vec::with_capacity(self.grid.len());
        for (i, &g) in self.grid.iter().enumerate() {
            let next = if i == 0 { beta + a[0] * g } else { v[i - 1] + a[i] * (g - self.grid[i - 1]) };
            v.push(next);
        }
        v
    }

    fn slopes(&self, c: usize) -> &[T] {
        let w = self.grid.len() + 1;
        &self.alphas.data()[c * w..(c + 1) * w]
    }

    /// Evaluates segment `s`'s affine formula at `x`, whether or not `x` lies in it.
    pub fn segment_formula(&self, c: usize, s: usize, x: T) -> T {
        let a = self.slopes(c);
        if s == 0 {
            self.beta.data()[c] + a[0] * x
        } else {
            self.endpoints(c)[s - 1] + a[s] * (x - self.grid[s - 1])
        }
    }

    /// Scalar evaluation for channel `c`.
    pub fn eval(&self, c: usize, x: T) -> T {
        self.segment_formula(c, self.segment(x), x)
    }
}

impl<T: Scalar> PlaneActivation<T> for GLinear<T> {
    fn channels(&self) -> usize {
        self.beta.len()
    }

    fn grad_width(&self) -> usize {
        self.grid.len() + 2
    }

    fn forward_plane<C: OpCounter>(&self, c: usize, x: &[T], y: &mut [T], counter: &C) {
        let a = self.slopes(c);
        let beta = self.beta.data()[c];
        let g = &self.grid;
        match g.len() {
            0 => {
                for (o, &v) in y.iter_mut().zip(x) {
                    *o = beta + a[0] * v;
                }
            }
            1 => {
                let (g0, a0, a1) = (g[0], a[0], a[1]);
                let v0 = beta + a0 * g0;
                for (o, &v) in y.iter_mut().zip(x) {
                    *o = if v <= g0 { beta + a0 * v } else { v0 + a1 * (v - g0) };
                }
                counter.add(x.len() as u64);
            }
            m => {
                let ends = self.endpoints(c);
                let mut cmps = 0u64;
                for (o, &v) in y.iter_mut().zip(x) {
                    let (mut lo, mut hi) = (0, m);
                    while lo < hi {
                        let mid = (lo + hi) / 2;
                        cmps += 1;
                        if g[mid] < v {
                            lo = mid + 1;
                        } else {
                            hi = mid;
                        }
                    }
                    *o = if lo == 0 { beta + a[0] * v } else { ends[lo - 1] + a[lo] * (v - g[lo - 1]) };
                }
                counter.add(cmps);
            }
        }
    }

    fn input_grad_plane(&self, c: usize, x: &[T], gy: &[T], gx: &mut [T]) {
        let a = self.slopes(c);
        for ((o, &v), &g) in gx.iter_mut().zip(x).zip(gy) {
            *o = g * a[self.segment(v)];
        }
    }

    /// Accumulates `[dα_1 … dα_{m+1}, dβ]`.
    fn param_grad_plane(&self, _c: usize, x: &[T], gy: &[T], acc: &mut [T]) {
        let m = self.grid.len();
        let g = &self.grid;
        // Segments below s contribute their full width; accumulate per-segment
        // sums of grad_y first so the telescoped widths are applied once.
        let mut seg_grad = vec![T::zero(); m + 1];
        let mut seg_gx = vec![T::zero(); m + 1];
        for (&v, &gv) in x.iter().zip(gy) {
            let s = self.segment(v);
            seg_grad[s] += gv;
            seg_gx[s] += gv * if s == 0 { v } else { v - g[s - 1] };
        }
        // dα_1: x for segment 0, g_1 for later segments.
        // dα_i (2 ≤ i ≤ s): g_i − g_{i−1}; dα_{s+1}: x − g_s.
        let mut tail = T::zero(); // Σ grad_y over segments strictly above the current one
        let mut width_terms = vec![T::zero(); m + 1];
        for s in (0..=m).rev() {
            width_terms[s] = tail;
            tail += seg_grad[s];
        }
        acc[0] += seg_gx[0] + if m > 0 { g[0] * width_terms[0] } else { T::zero() };
        for i in 1..=m {
            let width = if i < m { g[i] - g[i - 1] } else { T::zero() };
            acc[i] += seg_gx[i] + width * width_terms[i];
        }
        acc[m + 1] += seg_grad.iter().copied().sum::<T>();
    }
}

/// Saved state of [`glinear_fwd`].
#[derive(Clone, Debug)]
pub struct GLinearCache<T: Scalar> {
    x: Tensor<T>,
    params: GLinear<T>,
}

/// Applies per-channel GLinear along axis 1 of `x` (rank ≥ 2).
pub fn glinear_fwd<T: Scalar>(x: &Tensor<T>, p: &GLinear<T>) -> Result<(Tensor<T>, GLinearCache<T>)> {
    let l = super::plane_len(x, p.channels())?;
    let mut y = vec![T::zero(); x.len()];
    super::forward_planes(p, x.data(), &mut y, l, &crate::activations::NoCount);
    Ok((Tensor::from_parts(x.shape().to_vec(), y), GLinearCache { x: x.clone(), params: p.clone() }))
}

/// `(dx, dalphas, dbeta)` of [`glinear_fwd`].
pub fn glinear_bwd<T: Scalar>(gy: &Tensor<T>, cache: &GLinearCache<T>) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    ensure!(gy.shape() == cache.x.shape(), Contract, "gradient shape {:?} != input {:?}", gy.shape(), cache.x.shape());
    let p = &cache.params;
    let l = super::plane_len(&cache.x, p.channels())?;
    let (gx, flat) = super::backward_planes(p, cache.x.data(), gy.data(), l);
    let (c, w) = (p.channels(), p.grad_width());
    let mut ga = Vec::with_capacity(c * (w - 1));
    let mut gb = Vec::with_capacity(c);
    for row in flat.chunks(w) {
        ga.extend_from_slice(&row[..w - 1]);
        gb.push(row[w - 1]);
    }
    Ok((
        Tensor::from_parts(gy.shape().to_vec(), gx),
        Tensor::from_parts(vec![c, w - 1], ga),
        Tensor::from_parts(vec![c], gb),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(grid: &[f64], alphas: &[f64], beta: f64) -> GLinear<f64> {
        GLinear::from_params(
            grid,
            Tensor::new(vec![1, alphas.len()], alphas.to_vec()).unwrap(),
            Tensor::new(vec![1], vec![beta]).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn relu_specialization() {
        let p = single(&[0.0], &[0.0, 1.0], 0.0);
        assert_eq!(p.eval(0, 2.0), 2.0);
        assert_eq!(p.eval(0, -3.0), 0.0);
    }

    #[test]
    fn hand_evaluated_segments() {
        let p = single(&[0.0], &[0.5, 2.0], 0.1);
        assert!((p.eval(0, -1.0) + 0.4).abs() < 1e-15);
        assert!((p.eval(0, 1.0) - 2.1).abs() < 1e-15);
    }

    #[test]
    fn identity_initialization_and_default_grid() {
        let p = GLinear::<f64>::with_intervals(3, 2).unwrap();
        assert_eq!(p.grid(), &[0.0]);
        for x in [-2.0, 0.0, 0.7] {
            assert_eq!(p.eval(1, x), x);
        }
        assert_eq!(GLinear::<f64>::with_intervals(1, 4).unwrap().grid(), &[-1.0, 0.0, 1.0]);
        assert_eq!(GLinear::<f64>::with_intervals(1, 3).unwrap().grid(), &[-0.5, 0.5]);
    }

    #[test]
    fn unsorted_grid_is_rejected() {
        assert!(matches!(GLinear::<f64>::new(1, &[0.0, 0.0]), Err(crate::Error::Config(_))));
        assert!(matches!(GLinear::<f64>::new(1, &[1.0, -1.0]), Err(crate::Error::Config(_))));
    }

    #[test]
    fn knot_value_is_the_left_segment() {
        let p = single(&[0.0, 1.0], &[1.0, 2.0, 3.0], 0.0);
        assert_eq!(p.segment(1.0), 1);
        assert_eq!(p.eval(0, 1.0), 2.0);
        assert_eq!(p.segment_formula(0, 2, 1.0), 2.0);
    }

    #[test]
    fn gradients_below_first_knot_touch_only_first_slope() {
        let p = single(&[0.0, 1.0], &[1.0, 2.0, 3.0], 0.5);
        let x = Tensor::new(vec![1, 1, 3], vec![-1.0, -0.5, -2.0]).unwrap();
        let (_, cache) = glinear_fwd(&x, &p).unwrap();
        let (_, ga, gb) = glinear_bwd(&Tensor::ones(&[1, 1, 3]), &cache).unwrap();
        assert_eq!(ga.data(), &[-3.5, 0.0, 0.0]);
        assert_eq!(gb.data(), &[3.0]);
    }
}
