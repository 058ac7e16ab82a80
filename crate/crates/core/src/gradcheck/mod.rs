//! Central finite-difference checks of hand-written backward passes.
//!
//! Every check uses the scalar loss `L = Σ r ⊙ f(θ)` with a fixed random
//! weighting `r`. A plain sum would be degenerate for batch norm, whose
//! output sums to a constant per channel. The error reported for a tensor is
//! the norm-wise relative error `‖g − g_fd‖ / max(‖g‖, ‖g_fd‖)` over the
//! checked coordinates, falling back to the absolute norm when both
//! gradients vanish.

pub mod suite;

use std::fmt;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::tensor::Tensor;

/// Step and sampling options for one check.
#[derive(Clone, Copy, Debug)]
pub struct GradOpts {
    pub h: f64,
    /// Coordinates sampled per tensor; all of them when the tensor is smaller.
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for GradOpts {
    fn default() -> Self {
        Self { h: 1e-5, max_coords: 48, seed: 0 }
    }
}

/// Below this gradient norm the error is reported as absolute.
const VANISHING: f64 = 1e-8;

/// Outcome of comparing one analytic gradient with finite differences.
#[derive(Clone, Debug, Serialize)]
pub struct GradReport {
    pub name: String,
    pub rel_err: f64,
    pub coords: usize,
}

impl fmt::Display for GradReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:<40} {:>10.3e}  ({} coords)", self.name, self.rel_err, self.coords)
    }
}

/// Compares `analytic` with central differences of `loss` in the tensor
/// picked out of `model` by `select`.
pub fn check_param<M: Clone>(
    name: impl Into<String>,
    model: &M,
    analytic: &Tensor<f64>,
    select: impl Fn(&mut M) -> &mut Tensor<f64>,
    loss: impl Fn(&M) -> f64,
    opts: &GradOpts,
) -> GradReport {
    let mut m = model.clone();
    let len = select(&mut m).len();
    assert_eq!(len, analytic.len(), "analytic gradient has the wrong size");
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ len as u64);
    let idx: Vec<usize> = if len <= opts.max_coords {
        (0..len).collect()
    } else {
        sample(&mut rng, len, opts.max_coords).into_vec()
    };
    let (mut diff, mut na, mut nf) = (0.0, 0.0, 0.0);
    for &i in &idx {
        let orig = select(&mut m).data()[i];
        select(&mut m).data_mut()[i] = orig + opts.h;
        let lp = loss(&m);
        select(&mut m).data_mut()[i] = orig - opts.h;
        let lm = loss(&m);
        select(&mut m).data_mut()[i] = orig;
        let fd = (lp - lm) / (2.0 * opts.h);
        let a = analytic.data()[i];
        diff += (a - fd) * (a - fd);
        na += a * a;
        nf += fd * fd;
    }
    let denom = na.sqrt().max(nf.sqrt());
    let rel_err = if denom < VANISHING { diff.sqrt() } else { diff.sqrt() / denom };
    GradReport { name: name.into(), rel_err, coords: idx.len() }
}

/// `Σ r ⊙ y`.
pub fn weighted_sum(y: &Tensor<f64>, r: &Tensor<f64>) -> f64 {
    y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

/// Largest error in a set of reports.
pub fn worst(reports: &[GradReport]) -> f64 {
    reports.iter().map(|r| r.rel_err).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_a_wrong_gradient() {
        let x = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let loss = |t: &Tensor<f64>| t.data().iter().map(|v| v * v * v).sum::<f64>();
        let good = x.map(|v| 3.0 * v * v);
        let bad = good.map(|v| -v);
        let opts = GradOpts::default();
        assert!(check_param("good", &x, &good, |t| t, loss, &opts).rel_err < 1e-8);
        assert!(check_param("bad", &x, &bad, |t| t, loss, &opts).rel_err > 1.0);
    }
}
