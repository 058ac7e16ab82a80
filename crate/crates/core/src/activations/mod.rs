//! The fixed SiLU basis and the learnable per-channel activation families.
//!
//! Learnable activations operate on buffers viewed as planes: plane `p` of
//! length `l` belongs to channel `p % C`. This covers NCHW tensors
//! (`l = H·W`), unfolded patches (`l = K²·L`) and channel-major buffers
//! (a single plane per channel).

pub mod bspline;
pub mod counter;
pub mod glinear;
pub mod prelu;
pub mod silu;

use serde::{Deserialize, Serialize};

pub use bspline::{BSpline, SplineGrid};
pub use counter::{CountOps, NoCount, OpCounter};
pub use glinear::{glinear_bwd, glinear_fwd, GLinear, GLinearCache};
pub use prelu::PRelu;
pub use silu::{silu, silu_bwd, silu_fwd, silu_grad};

use crate::error::{ensure, Result};
use crate::parallel;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A per-channel elementwise map with learnable parameters.
pub trait PlaneActivation<T: Scalar>: Sync {
    fn channels(&self) -> usize;

    /// Length of one channel's flattened parameter gradient.
    fn grad_width(&self) -> usize;

    fn forward_plane<C: OpCounter>(&self, c: usize, x: &[T], y: &mut [T], counter: &C);

    fn input_grad_plane(&self, c: usize, x: &[T], gy: &[T], gx: &mut [T]);

    /// Adds this plane's contribution to channel `c`'s parameter gradient.
    fn param_grad_plane(&self, c: usize, x: &[T], gy: &[T], acc: &mut [T]);
}

pub(crate) fn plane_len<T: Scalar>(x: &Tensor<T>, channels: usize) -> Result<usize> {
    ensure!(x.ndim() >= 2, Dimension, "activation input must have a channel axis, got {:?}", x.shape());
    ensure!(
        x.shape()[1] == channels,
        Dimension,
        "activation has {channels} channels, input has {}",
        x.shape()[1]
    );
    Ok(x.shape()[2..].iter().product())
}

pub(crate) fn forward_planes<T: Scalar, A: PlaneActivation<T>, C: OpCounter>(
    act: &A,
    x: &[T],
    y: &mut [T],
    l: usize,
    counter: &C,
) {
    let c = act.channels();
    parallel::for_each_chunk_mut(y, l, |p, out| {
        act.forward_plane(p % c, &x[p * l..p * l + out.len()], out, counter);
    });
}

/// Input gradient and the `[C, grad_width]` parameter gradient.
pub(crate) fn backward_planes<T: Scalar, A: PlaneActivation<T>>(act: &A, x: &[T], gy: &[T], l: usize) -> (Vec<T>, Vec<T>) {
    let c = act.channels();
    let w = act.grad_width();
    let planes = x.len() / l;
    let mut gx = vec![T::zero(); x.len()];
    parallel::for_each_chunk_mut(&mut gx, l, |p, out| {
        act.input_grad_plane(p % c, &x[p * l..(p + 1) * l], &gy[p * l..(p + 1) * l], out);
    });
    let per_channel = parallel::map_indices(c, |ci| {
        let mut acc = vec![T::zero(); w];
        for p in (ci..planes).step_by(c) {
            act.param_grad_plane(ci, &x[p * l..(p + 1) * l], &gy[p * l..(p + 1) * l], &mut acc);
        }
        acc
    });
    (gx, per_channel.concat())
}

/// Which learnable activation a KA layer uses.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum ActivationKind {
    /// `intervals` linear pieces; the default 2 means one knot at 0.
    GLinear {
        #[serde(default = "default_intervals")]
        intervals: usize,
    },
    PRelu,
    BSpline {
        #[serde(flatten)]
        grid: SplineGrid,
    },
}

fn default_intervals() -> usize {
    2
}

impl Default for ActivationKind {
    fn default() -> Self {
        ActivationKind::GLinear { intervals: default_intervals() }
    }
}

impl ActivationKind {
    pub fn build<T: Scalar>(&self, channels: usize) -> Result<Activation<T>> {
        Ok(match *self {
            ActivationKind::GLinear { intervals } => Activation::GLinear(GLinear::with_intervals(channels, intervals)?),
            ActivationKind::PRelu => Activation::PRelu(PRelu::new(channels)),
            ActivationKind::BSpline { grid } => Activation::BSpline(BSpline::new(channels, grid)?),
        })
    }

    /// Short label used in reports, e.g. `glinear`.
    pub fn label(&self) -> &'static str {
        match self {
            ActivationKind::GLinear { .. } => "glinear",
            ActivationKind::PRelu => "prelu",
            ActivationKind::BSpline { .. } => "bspline",
        }
    }

    /// The grid size reported alongside ablation results.
    pub fn grid_size(&self) -> Option<usize> {
        match self {
            ActivationKind::GLinear { intervals } => Some(*intervals),
            ActivationKind::PRelu => None,
            ActivationKind::BSpline { grid } => Some(grid.intervals),
        }
    }

    /// Learnable parameters per channel.
    pub fn params_per_channel(&self) -> usize {
        match self {
            ActivationKind::GLinear { intervals } => intervals + 1,
            ActivationKind::PRelu => 1,
            ActivationKind::BSpline { grid } => grid.bases(),
        }
    }
}

/// A learnable activation of any family.
#[derive(Clone, Debug, PartialEq)]
pub enum Activation<T: Scalar> {
    GLinear(GLinear<T>),
    PRelu(PRelu<T>),
    BSpline(BSpline<T>),
}

/// A named parameter tensor and whether weight decay applies to it.
pub struct ParamRef<'a, T: Scalar> {
    pub name: &'static str,
    pub tensor: &'a Tensor<T>,
    pub decay: bool,
}

macro_rules! dispatch {
    ($self:expr, $a:ident => $body:expr) => {
        match $self {
            Activation::GLinear($a) => $body,
            Activation::PRelu($a) => $body,
            Activation::BSpline($a) => $body,
        }
    };
}

impl<T: Scalar> Activation<T> {
    pub fn channels(&self) -> usize {
        dispatch!(self, a => a.channels())
    }

    /// Applies the activation to `[N, C, l]`-shaped data.
    pub fn forward_into<C: OpCounter>(&self, x: &[T], y: &mut [T], l: usize, counter: &C) -> Result<()> {
        ensure!(
            x.len() == y.len() && l > 0 && x.len().is_multiple_of(l * self.channels()),
            Dimension,
            "activation buffer of {} elements is not a whole number of [{}, {l}] slabs",
            x.len(),
            self.channels()
        );
        dispatch!(self, a => forward_planes(a, x, y, l, counter));
        Ok(())
    }

    /// In-place variant of [`Self::forward_into`].
    pub fn apply_inplace(&self, x: &mut [T], l: usize) -> Result<()> {
        let c = self.channels();
        ensure!(l > 0 && x.len().is_multiple_of(l * c), Dimension, "activation buffer is not a whole number of [{c}, {l}] slabs");
        // Planes are independent, so each is copied once and written back.
        parallel::for_each_chunk_mut(x, l, |p, plane| {
            let src = plane.to_vec();
            dispatch!(self, a => a.forward_plane(p % c, &src, plane, &NoCount));
        });
        Ok(())
    }

    /// Input gradient and per-parameter gradients, in [`Self::params`] order.
    pub fn backward(&self, x: &[T], gy: &[T], l: usize) -> Result<(Vec<T>, Vec<Tensor<T>>)> {
        ensure!(x.len() == gy.len(), Contract, "activation gradient has {} elements, input {}", gy.len(), x.len());
        let c = self.channels();
        let (gx, flat) = dispatch!(self, a => backward_planes(a, x, gy, l));
        let grads = match self {
            Activation::GLinear(g) => {
                let w = g.knots() + 2;
                let mut ga = Vec::with_capacity(c * (w - 1));
                let mut gb = Vec::with_capacity(c);
                for row in flat.chunks(w) {
                    ga.extend_from_slice(&row[..w - 1]);
                    gb.push(row[w - 1]);
                }
                vec![Tensor::from_parts(vec![c, w - 1], ga), Tensor::from_parts(vec![c], gb)]
            }
            Activation::PRelu(_) => vec![Tensor::from_parts(vec![c], flat)],
            Activation::BSpline(s) => vec![Tensor::from_parts(vec![c, s.grid().bases()], flat)],
        };
        Ok((gx, grads))
    }

    pub fn params(&self) -> Vec<ParamRef<'_, T>> {
        match self {
            Activation::GLinear(g) => vec![
                ParamRef { name: "alphas", tensor: &g.alphas, decay: true },
                ParamRef { name: "beta", tensor: &g.beta, decay: false },
            ],
            Activation::PRelu(p) => vec![ParamRef { name: "slope", tensor: &p.slope, decay: true }],
            Activation::BSpline(s) => vec![ParamRef { name: "coeffs", tensor: &s.coeffs, decay: true }],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        match self {
            Activation::GLinear(g) => vec![&mut g.alphas, &mut g.beta],
            Activation::PRelu(p) => vec![&mut p.slope],
            Activation::BSpline(s) => vec![&mut s.coeffs],
        }
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.tensor.len()).sum()
    }

    /// Scalar evaluation for channel `c`.
    pub fn eval(&self, c: usize, x: T) -> T {
        let mut y = [T::zero()];
        dispatch!(self, a => a.forward_plane(c, &[x], &mut y, &NoCount));
        y[0]
    }

    /// Applies channel `c`'s map to one contiguous plane.
    pub fn forward_plane_into<C: OpCounter>(&self, c: usize, x: &[T], y: &mut [T], counter: &C) {
        dispatch!(self, a => a.forward_plane(c, x, y, counter));
    }

    pub fn cast<U: Scalar>(&self) -> Activation<U> {
        match self {
            Activation::GLinear(g) => Activation::GLinear(
                GLinear::from_params(
                    &g.grid().iter().map(|v| v.as_f64()).collect::<Vec<_>>(),
                    g.alphas.cast(),
                    g.beta.cast(),
                )
                .expect("valid grid"),
            ),
            Activation::PRelu(p) => Activation::PRelu(PRelu { slope: p.slope.cast() }),
            Activation::BSpline(s) => Activation::BSpline(BSpline::from_coeffs(*s.grid(), s.coeffs.cast()).expect("valid grid")),
        }
    }
}
