//! The Kolmogorov-Arnold convolution layer.
//!
//! For every input channel `c` and output location, the `K×K` patch `u` is
//! reduced by `Q = 2K² + 1` pairs of inner functions:
//!
//! ```text
//! a_q = Σ_k w_base[c,q,k] · silu(u_k)      (fixed basis branch)
//! b_q = Σ_k w_learn[c,q,k] · φ_c(u_k)      (learnable branch, φ per channel)
//! p_q = a_q · b_q
//! ```
//!
//! The `C·Q` products are batch-normalized, passed through SiLU, collapsed by
//! the outer stage and finally mixed to `C_out` channels by a 1×1 map with
//! bias. Internally every stage works on channel-major `[C, N·L]` buffers so
//! the per-channel reductions and the 1×1 stages become plain matrix products.

mod flops;
mod infer;
mod oracle;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use flops::KaConvFlops;
pub use oracle::kaconv_reference_oracle;

use crate::activations::{silu, silu_grad, Activation, ActivationKind, NoCount, ParamRef};
use crate::error::{ensure, Result};
use crate::ops::conv::{col2im_plane_add, im2col_plane, ConvSpec, Patches};
use crate::ops::norm::{BatchNorm, BnCache, Mode};
use crate::parallel;
use crate::scalar::{gemm, par_gemm, Scalar, Trans};
use crate::tensor::{cm_to_nchw, nchw_to_cm, Tensor};

/// How the `C·Q` normalized products are collapsed before channel mixing.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OuterMode {
    /// One learnable map `C·Q → C`: every outer term sees every channel.
    #[default]
    Dense,
    /// Grouped 1×1 map collapsing each channel's `Q` terms to one value.
    PerChannel,
}

/// Where the two inner branches are multiplied.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProductMode {
    /// Product of the two patch sums, `a_q · b_q`.
    #[default]
    AfterAggregation,
    /// Sum of per-element products, `Σ_k w_base·w_learn·silu(u_k)·φ(u_k)`.
    PerElement,
}

/// Shape and options of one KA layer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KaConvConfig {
    pub c_in: usize,
    pub c_out: usize,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    #[serde(default = "one")]
    pub stride: usize,
    /// Defaults to `kernel / 2`.
    #[serde(default)]
    pub padding: Option<usize>,
    #[serde(default)]
    pub activation: ActivationKind,
    #[serde(default)]
    pub outer: OuterMode,
    #[serde(default)]
    pub product: ProductMode,
}

fn default_kernel() -> usize {
    3
}

fn one() -> usize {
    1
}

impl KaConvConfig {
    pub fn new(c_in: usize, c_out: usize, kernel: usize, stride: usize) -> Self {
        Self {
            c_in,
            c_out,
            kernel,
            stride,
            padding: None,
            activation: ActivationKind::default(),
            outer: OuterMode::default(),
            product: ProductMode::default(),
        }
    }

    pub fn with_activation(mut self, activation: ActivationKind) -> Self {
        self.activation = activation;
        self
    }

    pub fn with_outer(mut self, outer: OuterMode) -> Self {
        self.outer = outer;
        self
    }

    pub fn with_product(mut self, product: ProductMode) -> Self {
        self.product = product;
        self
    }

    /// Number of outer terms, `2K² + 1`.
    pub fn q(&self) -> usize {
        2 * self.kernel * self.kernel + 1
    }

    /// The per-channel patch geometry.
    pub fn spec(&self) -> ConvSpec {
        ConvSpec::new(self.kernel, self.stride, self.padding.unwrap_or(self.kernel / 2), self.c_in)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.c_in >= 1 && self.c_out >= 1 && self.kernel >= 1 && self.stride >= 1,
            Config,
            "KA layer needs positive channels, kernel and stride: {self:?}"
        );
        Ok(())
    }

    pub fn outer_shape(&self) -> [usize; 4] {
        match self.outer {
            OuterMode::Dense => [self.c_in, self.c_in * self.q(), 1, 1],
            OuterMode::PerChannel => [self.c_in, self.q(), 1, 1],
        }
    }

    /// Learnable parameter count.
    pub fn param_count(&self) -> usize {
        let (c, q, kk) = (self.c_in, self.q(), self.kernel * self.kernel);
        let outer: usize = self.outer_shape().iter().product();
        2 * c * q * kk + c * self.activation.params_per_channel() + 2 * c * q + outer + c * self.c_out + self.c_out
    }
}

/// Parameters and running statistics of one KA layer.
#[derive(Clone, Debug, PartialEq)]
pub struct KaConv<T: Scalar> {
    cfg: KaConvConfig,
    /// `[C·Q, 1, K, K]`, applied to `silu(x)`.
    pub w_base: Tensor<T>,
    /// `[C·Q, 1, K², 1]`, applied to the activated unfolded patches.
    pub w_learn: Tensor<T>,
    pub act: Activation<T>,
    /// Over the `C·Q` products.
    pub norm: BatchNorm<T>,
    /// `[C, C·Q, 1, 1]` (dense) or `[C, Q, 1, 1]` (per channel).
    pub w_outer: Tensor<T>,
    /// `[C_out, C, 1, 1]`.
    pub w_mix: Tensor<T>,
    pub b_mix: Tensor<T>,
}

/// Uniform on `±1/√fan_in`, the common default for convolution weights.
fn kaiming<T: Scalar, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let b = 1.0 / (fan_in as f64).sqrt();
    Tensor::uniform(shape, -b, b, rng)
}

impl<T: Scalar> KaConv<T> {
    pub fn new<R: Rng + ?Sized>(cfg: KaConvConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let (c, q, k) = (cfg.c_in, cfg.q(), cfg.kernel);
        let outer = cfg.outer_shape();
        Ok(Self {
            w_base: kaiming(&[c * q, 1, k, k], k * k, rng),
            w_learn: kaiming(&[c * q, 1, k * k, 1], k * k, rng),
            act: cfg.activation.build(c)?,
            norm: BatchNorm::new(c * q),
            w_outer: kaiming(&outer, outer[1], rng),
            w_mix: kaiming(&[cfg.c_out, c, 1, 1], c, rng),
            b_mix: kaiming(&[cfg.c_out], c, rng),
            cfg,
        })
    }

    pub fn config(&self) -> &KaConvConfig {
        &self.cfg
    }

    pub fn q(&self) -> usize {
        self.cfg.q()
    }

    pub fn out_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        self.cfg.spec().out_hw(h, w)
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.tensor.len()).sum()
    }

    pub fn flops(&self, h: usize, w: usize) -> Result<KaConvFlops> {
        let (ho, wo) = self.out_hw(h, w)?;
        Ok(KaConvFlops::new(&self.cfg, ho, wo))
    }

    /// Learnable tensors in a fixed order shared with [`KaConvGrads::into_vec`].
    pub fn params(&self) -> Vec<ParamRef<'_, T>> {
        let mut out = vec![
            ParamRef { name: "w_base", tensor: &self.w_base, decay: true },
            ParamRef { name: "w_learn", tensor: &self.w_learn, decay: true },
        ];
        for p in self.act.params() {
            out.push(ParamRef { name: act_name(p.name), ..p });
        }
        out.extend([
            ParamRef { name: "norm.gamma", tensor: &self.norm.gamma, decay: false },
            ParamRef { name: "norm.beta", tensor: &self.norm.beta, decay: false },
            ParamRef { name: "w_outer", tensor: &self.w_outer, decay: true },
            ParamRef { name: "w_mix", tensor: &self.w_mix, decay: true },
            ParamRef { name: "b_mix", tensor: &self.b_mix, decay: false },
        ]);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.w_base, &mut self.w_learn];
        out.extend(self.act.params_mut());
        out.extend([
            &mut self.norm.gamma,
            &mut self.norm.beta,
            &mut self.w_outer,
            &mut self.w_mix,
            &mut self.b_mix,
        ]);
        out
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<(usize, Patches)> {
        let (n, c, h, w) = x.dims4()?;
        ensure!(c == self.cfg.c_in, Dimension, "KA layer expects {} input channels, got {c}", self.cfg.c_in);
        Ok((n, Patches::new(h, w, &self.cfg.spec())?))
    }

    /// The inner two-branch stage: `[N, C·Q, H', W']` products plus both branches.
    pub fn convkan(&self, x: &Tensor<T>) -> Result<ConvKanParts<T>> {
        let (n, p) = self.check_input(x)?;
        let inner = self.inner_forward(x, n, &p)?;
        let cq = self.cfg.c_in * self.q();
        let l = p.l();
        let shape = vec![n, cq, p.ho, p.wo];
        let to_nchw = |v: &[T]| Tensor::from_parts(shape.clone(), cm_to_nchw(v, n, cq, l));
        Ok(ConvKanParts {
            base: inner.a.as_deref().map(to_nchw),
            learn: inner.b.as_deref().map(to_nchw),
            product: to_nchw(&inner.p),
        })
    }

    /// Unfold, both branches and their product, all channel-major.
    fn inner_forward(&self, x: &Tensor<T>, n: usize, p: &Patches) -> Result<Inner<T>> {
        let (c, q, kk, l) = (self.cfg.c_in, self.q(), p.kk(), p.l());
        let m = n * l;
        let (h, w) = (p.h, p.w);
        let xs = x.data();

        // U: [C, K², M]
        let mut u = vec![T::zero(); c * kk * m];
        parallel::for_each_chunk_mut(&mut u, kk * m, |ci, dst| {
            for ni in 0..n {
                let plane = &xs[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
                im2col_plane(p, plane, &mut dst[ni * l..], m);
            }
        });
        let mut g = vec![T::zero(); u.len()];
        self.act.forward_into(&u, &mut g, kk * m, &NoCount)?;

        let (wb, wl) = (self.w_base.data(), self.w_learn.data());
        let mut prod = vec![T::zero(); c * q * m];
        match self.cfg.product {
            ProductMode::AfterAggregation => {
                let mut a = vec![T::zero(); c * q * m];
                let mut b = vec![T::zero(); c * q * m];
                parallel::for_each_chunk_mut2(&mut a, q * m, &mut b, q * m, |ci, ac, bc| {
                    let uc = &u[ci * kk * m..(ci + 1) * kk * m];
                    let sc: Vec<T> = uc.iter().map(|&v| silu(v)).collect();
                    gemm(Trans::N, Trans::N, q, m, kk, T::one(), &wb[ci * q * kk..], kk, &sc, m, T::zero(), ac, m);
                    gemm(Trans::N, Trans::N, q, m, kk, T::one(), &wl[ci * q * kk..], kk, &g[ci * kk * m..], m, T::zero(), bc, m);
                });
                for ((o, &x), &y) in prod.iter_mut().zip(&a).zip(&b) {
                    *o = x * y;
                }
                Ok(Inner { u, g, a: Some(a), b: Some(b), sg: None, p: prod })
            }
            ProductMode::PerElement => {
                let weff: Vec<T> = wb.iter().zip(wl).map(|(&x, &y)| x * y).collect();
                let sg: Vec<T> = u.iter().zip(&g).map(|(&v, &gv)| silu(v) * gv).collect();
                parallel::for_each_chunk_mut(&mut prod, q * m, |ci, pc| {
                    gemm(Trans::N, Trans::N, q, m, kk, T::one(), &weff[ci * q * kk..], kk, &sg[ci * kk * m..], m, T::zero(), pc, m);
                });
                Ok(Inner { u, g, a: None, b: None, sg: Some(sg), p: prod })
            }
        }
    }

    /// Full layer forward pass, `[N, C_in, H, W] → [N, C_out, H', W']`.
    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, KaConvCache<T>)> {
        let (n, p) = self.check_input(x)?;
        let (c, q, c_out, l) = (self.cfg.c_in, self.q(), self.cfg.c_out, p.l());
        let m = n * l;
        let inner = self.inner_forward(x, n, &p)?;
        let (z, bn) = self.norm.forward_raw(&inner.p, 1, c * q, m, mode)?;
        let sz: Vec<T> = z.iter().map(|&v| silu(v)).collect();
        let o = self.outer_forward(&sz, m);
        let mut y = vec![T::zero(); c_out * m];
        for (row, &b) in y.chunks_mut(m).zip(self.b_mix.data()) {
            row.iter_mut().for_each(|v| *v = b);
        }
        par_gemm(Trans::N, Trans::N, c_out, m, c, T::one(), self.w_mix.data(), c, &o, m, T::one(), &mut y, m);
        let out = Tensor::from_parts(vec![n, c_out, p.ho, p.wo], cm_to_nchw(&y, n, c_out, l));
        let cache = KaConvCache { in_shape: x.shape().to_vec(), patches: p, inner, bn, z, o };
        Ok((out, cache))
    }

    fn outer_forward(&self, sz: &[T], m: usize) -> Vec<T> {
        let (c, q) = (self.cfg.c_in, self.q());
        let wo = self.w_outer.data();
        let mut o = vec![T::zero(); c * m];
        match self.cfg.outer {
            OuterMode::Dense => par_gemm(Trans::N, Trans::N, c, m, c * q, T::one(), wo, c * q, sz, m, T::zero(), &mut o, m),
            OuterMode::PerChannel => parallel::for_each_chunk_mut(&mut o, m, |ci, oc| {
                gemm(Trans::N, Trans::N, 1, m, q, T::one(), &wo[ci * q..], q, &sz[ci * q * m..], m, T::zero(), oc, m);
            }),
        }
        o
    }

    /// Exact gradients of [`Self::forward`].
    pub fn backward(&self, grad_y: &Tensor<T>, cache: &KaConvCache<T>) -> Result<KaConvGrads<T>> {
        let p = &cache.patches;
        let n = cache.in_shape[0];
        let (c, q, c_out, l) = (self.cfg.c_in, self.q(), self.cfg.c_out, p.l());
        let m = n * l;
        ensure!(
            grad_y.shape() == [n, c_out, p.ho, p.wo] && cache.z.len() == c * q * m,
            Contract,
            "gradient shape {:?} does not match the cached forward output [{n}, {c_out}, {}, {}]",
            grad_y.shape(),
            p.ho,
            p.wo
        );
        let gy = nchw_to_cm(grad_y.data(), n, c_out, l);

        // Mix stage.
        let b_mix: Vec<T> = gy.chunks(m).map(|r| r.iter().copied().sum()).collect();
        let mut w_mix = vec![T::zero(); c_out * c];
        par_gemm(Trans::N, Trans::T, c_out, c, m, T::one(), &gy, m, &cache.o, m, T::zero(), &mut w_mix, c);
        let mut go = vec![T::zero(); c * m];
        par_gemm(Trans::T, Trans::N, c, m, c_out, T::one(), self.w_mix.data(), c, &gy, m, T::zero(), &mut go, m);

        // Outer stage.
        let sz: Vec<T> = cache.z.iter().map(|&v| silu(v)).collect();
        let wo = self.w_outer.data();
        let mut w_outer = vec![T::zero(); wo.len()];
        let mut gsz = vec![T::zero(); c * q * m];
        match self.cfg.outer {
            OuterMode::Dense => {
                par_gemm(Trans::N, Trans::T, c, c * q, m, T::one(), &go, m, &sz, m, T::zero(), &mut w_outer, c * q);
                par_gemm(Trans::T, Trans::N, c * q, m, c, T::one(), wo, c * q, &go, m, T::zero(), &mut gsz, m);
            }
            OuterMode::PerChannel => {
                parallel::for_each_chunk_mut2(&mut w_outer, q, &mut gsz, q * m, |ci, gw, gs| {
                    let goc = &go[ci * m..(ci + 1) * m];
                    gemm(Trans::N, Trans::T, 1, q, m, T::one(), goc, m, &sz[ci * q * m..], m, T::zero(), gw, q);
                    gemm(Trans::T, Trans::N, q, m, 1, T::one(), &wo[ci * q..], q, goc, m, T::zero(), gs, m);
                });
            }
        }

        // SiLU and batch norm.
        for (g, &z) in gsz.iter_mut().zip(&cache.z) {
            *g *= silu_grad(z);
        }
        let (gp, gamma, beta) = cache.bn.backward_raw(&gsz)?;

        let (gx, w_base, w_learn, act) = self.inner_backward(&cache.inner, p, n, &gp)?;

        Ok(KaConvGrads {
            x: Tensor::from_parts(cache.in_shape.clone(), gx),
            w_base,
            w_learn,
            act,
            gamma: Tensor::from_parts(vec![c * q], gamma),
            beta: Tensor::from_parts(vec![c * q], beta),
            w_outer: Tensor::from_parts(self.w_outer.shape().to_vec(), w_outer),
            w_mix: Tensor::from_parts(self.w_mix.shape().to_vec(), w_mix),
            b_mix: Tensor::from_parts(vec![c_out], b_mix),
        })
    }

    /// Backward through unfold, both branches and their product, given the
    /// channel-major gradient of the products. Returns the flat input gradient.
    #[allow(clippy::type_complexity)]
    fn inner_backward(
        &self,
        inner: &Inner<T>,
        p: &Patches,
        n: usize,
        gp: &[T],
    ) -> Result<(Vec<T>, Tensor<T>, Tensor<T>, Vec<Tensor<T>>)> {
        let (c, q, kk, l) = (self.cfg.c_in, self.q(), p.kk(), p.l());
        let m = n * l;
        // Inner branches, one channel at a time.
        let (wb, wl) = (self.w_base.data(), self.w_learn.data());
        let per_channel = parallel::map_indices(c, |ci| {
            let uc = &inner.u[ci * kk * m..(ci + 1) * kk * m];
            let gc = &inner.g[ci * kk * m..(ci + 1) * kk * m];
            let gpc = &gp[ci * q * m..(ci + 1) * q * m];
            let wbc = &wb[ci * q * kk..(ci + 1) * q * kk];
            let wlc = &wl[ci * q * kk..(ci + 1) * q * kk];
            let mut gwb = vec![T::zero(); q * kk];
            let mut gwl = vec![T::zero(); q * kk];
            let mut gs = vec![T::zero(); kk * m];
            let mut gg = vec![T::zero(); kk * m];
            match self.cfg.product {
                ProductMode::AfterAggregation => {
                    let ac = &inner.a.as_ref().expect("branch cache")[ci * q * m..(ci + 1) * q * m];
                    let bc = &inner.b.as_ref().expect("branch cache")[ci * q * m..(ci + 1) * q * m];
                    let ga: Vec<T> = gpc.iter().zip(bc).map(|(&g, &b)| g * b).collect();
                    let gb: Vec<T> = gpc.iter().zip(ac).map(|(&g, &a)| g * a).collect();
                    let sc: Vec<T> = uc.iter().map(|&v| silu(v)).collect();
                    gemm(Trans::N, Trans::T, q, kk, m, T::one(), &ga, m, &sc, m, T::zero(), &mut gwb, kk);
                    gemm(Trans::N, Trans::T, q, kk, m, T::one(), &gb, m, gc, m, T::zero(), &mut gwl, kk);
                    gemm(Trans::T, Trans::N, kk, m, q, T::one(), wbc, kk, &ga, m, T::zero(), &mut gs, m);
                    gemm(Trans::T, Trans::N, kk, m, q, T::one(), wlc, kk, &gb, m, T::zero(), &mut gg, m);
                }
                ProductMode::PerElement => {
                    let sgc = &inner.sg.as_ref().expect("product cache")[ci * kk * m..(ci + 1) * kk * m];
                    let weff: Vec<T> = wbc.iter().zip(wlc).map(|(&a, &b)| a * b).collect();
                    let mut gweff = vec![T::zero(); q * kk];
                    gemm(Trans::N, Trans::T, q, kk, m, T::one(), gpc, m, sgc, m, T::zero(), &mut gweff, kk);
                    for i in 0..q * kk {
                        gwb[i] = gweff[i] * wlc[i];
                        gwl[i] = gweff[i] * wbc[i];
                    }
                    let mut gsg = vec![T::zero(); kk * m];
                    gemm(Trans::T, Trans::N, kk, m, q, T::one(), &weff, kk, gpc, m, T::zero(), &mut gsg, m);
                    for i in 0..kk * m {
                        gs[i] = gsg[i] * gc[i];
                        gg[i] = gsg[i] * silu(uc[i]);
                    }
                }
            }
            // Chain through the fixed SiLU basis.
            for (g, &v) in gs.iter_mut().zip(uc) {
                *g *= silu_grad(v);
            }
            (gwb, gwl, gs, gg)
        });
        let mut w_base = Vec::with_capacity(c * q * kk);
        let mut w_learn = Vec::with_capacity(c * q * kk);
        let mut gu = Vec::with_capacity(c * kk * m);
        let mut gg = Vec::with_capacity(c * kk * m);
        for (a, b, s, g) in per_channel {
            w_base.extend(a);
            w_learn.extend(b);
            gu.extend(s);
            gg.extend(g);
        }
        let (gu_act, act) = self.act.backward(&inner.u, &gg, kk * m)?;
        for (a, b) in gu.iter_mut().zip(&gu_act) {
            *a += *b;
        }

        // Fold patch gradients back onto the input.
        let (h, w) = (p.h, p.w);
        let mut gx = vec![T::zero(); n * c * h * w];
        parallel::for_each_chunk_mut(&mut gx, h * w, |plane, dst| {
            let (ni, ci) = (plane / c, plane % c);
            col2im_plane_add(p, &gu[ci * kk * m + ni * l..], m, dst);
        });
        Ok((
            gx,
            Tensor::from_parts(self.w_base.shape().to_vec(), w_base),
            Tensor::from_parts(self.w_learn.shape().to_vec(), w_learn),
            act,
        ))

    }

    /// Gradients of [`Self::convkan`]'s product with respect to the input,
    /// `w_base`, `w_learn` and the activation parameters (in that order).
    pub fn convkan_backward(&self, x: &Tensor<T>, grad_product: &Tensor<T>) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        let (n, p) = self.check_input(x)?;
        let cq = self.cfg.c_in * self.q();
        ensure!(
            grad_product.shape() == [n, cq, p.ho, p.wo],
            Contract,
            "product gradient shape {:?} != [{n}, {cq}, {}, {}]",
            grad_product.shape(),
            p.ho,
            p.wo
        );
        let inner = self.inner_forward(x, n, &p)?;
        let gp = nchw_to_cm(grad_product.data(), n, cq, p.l());
        let (gx, w_base, w_learn, act) = self.inner_backward(&inner, &p, n, &gp)?;
        let mut grads = vec![w_base, w_learn];
        grads.extend(act);
        Ok((Tensor::from_parts(x.shape().to_vec(), gx), grads))
    }

    /// Folds a train-mode batch's statistics into the norm's running estimates.
    pub fn update_running(&mut self, cache: &KaConvCache<T>, momentum: f64) {
        self.norm.update_running(&cache.bn, momentum);
    }

    pub fn cast<U: Scalar>(&self) -> KaConv<U> {
        KaConv {
            cfg: self.cfg,
            w_base: self.w_base.cast(),
            w_learn: self.w_learn.cast(),
            act: self.act.cast(),
            norm: BatchNorm {
                gamma: self.norm.gamma.cast(),
                beta: self.norm.beta.cast(),
                running_mean: self.norm.running_mean.cast(),
                running_var: self.norm.running_var.cast(),
            },
            w_outer: self.w_outer.cast(),
            w_mix: self.w_mix.cast(),
            b_mix: self.b_mix.cast(),
        }
    }
}

fn act_name(name: &str) -> &'static str {
    match name {
        "alphas" => "act.alphas",
        "beta" => "act.beta",
        "slope" => "act.slope",
        "coeffs" => "act.coeffs",
        _ => "act",
    }
}

/// Channel-major intermediates of the inner stage.
#[derive(Clone, Debug)]
struct Inner<T: Scalar> {
    u: Vec<T>,
    g: Vec<T>,
    a: Option<Vec<T>>,
    b: Option<Vec<T>>,
    sg: Option<Vec<T>>,
    p: Vec<T>,
}

/// Outputs of the inner stage in NCHW layout.
#[derive(Clone, Debug)]
pub struct ConvKanParts<T: Scalar> {
    /// SiLU-basis branch (absent in per-element product mode).
    pub base: Option<Tensor<T>>,
    /// Learnable-activation branch (absent in per-element product mode).
    pub learn: Option<Tensor<T>>,
    pub product: Tensor<T>,
}

/// Saved state of one [`KaConv::forward`] call.
#[derive(Clone, Debug)]
pub struct KaConvCache<T: Scalar> {
    in_shape: Vec<usize>,
    patches: Patches,
    inner: Inner<T>,
    bn: BnCache<T>,
    z: Vec<T>,
    o: Vec<T>,
}

impl<T: Scalar> KaConvCache<T> {
    /// The activated tensor fed to the outer stage, `[N, C·Q, H', W']`.
    pub fn post_activation(&self) -> Tensor<T> {
        let n = self.in_shape[0];
        let l = self.patches.l();
        let cq = self.z.len() / (n * l);
        let sz: Vec<T> = self.z.iter().map(|&v| silu(v)).collect();
        Tensor::from_parts(vec![n, cq, self.patches.ho, self.patches.wo], cm_to_nchw(&sz, n, cq, l))
    }

    pub fn norm_cache(&self) -> &BnCache<T> {
        &self.bn
    }
}

/// Gradients for the input and every learnable field of a KA layer.
#[derive(Clone, Debug)]
pub struct KaConvGrads<T: Scalar> {
    pub x: Tensor<T>,
    pub w_base: Tensor<T>,
    pub w_learn: Tensor<T>,
    /// In the activation's own parameter order.
    pub act: Vec<Tensor<T>>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub w_outer: Tensor<T>,
    pub w_mix: Tensor<T>,
    pub b_mix: Tensor<T>,
}

impl<T: Scalar> KaConvGrads<T> {
    /// Parameter gradients in [`KaConv::params`] order, plus the input gradient.
    pub fn into_vec(self) -> (Tensor<T>, Vec<Tensor<T>>) {
        let mut v = vec![self.w_base, self.w_learn];
        v.extend(self.act);
        v.extend([self.gamma, self.beta, self.w_outer, self.w_mix, self.b_mix]);
        (self.x, v)
    }
}

#[cfg(test)]
mod tests;
