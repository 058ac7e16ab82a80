//! Cache-free eval-mode forward pass that streams over output tiles.
//!
//! Normalization uses running statistics, so every output location is
//! independent and the layer can be evaluated one tile of locations at a
//! time. Peak memory is a few `C·Q·TILE` buffers regardless of batch size,
//! which is what makes large benchmark shapes feasible.

use super::{KaConv, OuterMode, ProductMode};
use crate::activations::{silu, OpCounter};
use crate::error::Result;
use crate::ops::conv::Patches;
use crate::ops::norm::BN_EPS;
use crate::parallel;
use crate::scalar::{gemm, par_gemm, Scalar, Trans};
use crate::tensor::Tensor;

/// Output locations processed together.
const TILE: usize = 1024;

/// Patch rows for output locations `l0..l0 + t` of one plane.
fn im2col_tile<T: Scalar>(p: &Patches, plane: &[T], l0: usize, t: usize, dst: &mut [T]) {
    for ky in 0..p.k {
        for kx in 0..p.k {
            let row = &mut dst[(ky * p.k + kx) * t..(ky * p.k + kx + 1) * t];
            for (j, v) in row.iter_mut().enumerate() {
                let li = l0 + j;
                *v = match p.source(li / p.wo, li % p.wo, ky, kx) {
                    Some(i) => plane[i],
                    None => T::zero(),
                };
            }
        }
    }
}

impl<T: Scalar> KaConv<T> {
    /// Eval-mode forward without caches; equal to `forward(x, Mode::Eval)`.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.infer_counted(x, &crate::activations::NoCount)
    }

    /// [`Self::infer`] reporting learnable-activation work to `counter`.
    pub fn infer_counted<C: OpCounter>(&self, x: &Tensor<T>, counter: &C) -> Result<Tensor<T>> {
        let (n, p) = self.check_input(x)?;
        let (c, q, c_out, kk, l) = (self.cfg.c_in, self.q(), self.cfg.c_out, p.kk(), p.l());
        let (h, w) = (p.h, p.w);
        let eps = T::lit(BN_EPS);
        let bn = &self.norm;
        let scale: Vec<T> = bn
            .gamma
            .data()
            .iter()
            .zip(bn.running_var.data())
            .map(|(&g, &v)| g / (v + eps).sqrt())
            .collect();
        let shift: Vec<T> = bn
            .beta
            .data()
            .iter()
            .zip(bn.running_mean.data())
            .zip(&scale)
            .map(|((&b, &m), &s)| b - m * s)
            .collect();
        let (wb, wl, wo) = (self.w_base.data(), self.w_learn.data(), self.w_outer.data());
        let weff: Vec<T> = match self.cfg.product {
            ProductMode::PerElement => wb.iter().zip(wl).map(|(&a, &b)| a * b).collect(),
            ProductMode::AfterAggregation => Vec::new(),
        };
        let xs = x.data();
        let mut out = vec![T::zero(); n * c_out * l];
        let mut sz = vec![T::zero(); c * q * TILE.min(l)];
        let mut o = vec![T::zero(); c * TILE.min(l)];
        let mut y = vec![T::zero(); c_out * TILE.min(l)];

        for ni in 0..n {
            for l0 in (0..l).step_by(TILE) {
                let t = TILE.min(l - l0);
                let sz = &mut sz[..c * q * t];
                parallel::for_each_chunk_mut(sz, q * t, |ci, szc| {
                    let plane = &xs[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
                    let mut u = vec![T::zero(); kk * t];
                    im2col_tile(&p, plane, l0, t, &mut u);
                    let mut g = vec![T::zero(); kk * t];
                    self.act.forward_plane_into(ci, &u, &mut g, counter);
                    match self.cfg.product {
                        ProductMode::AfterAggregation => {
                            let s: Vec<T> = u.iter().map(|&v| silu(v)).collect();
                            let mut b = vec![T::zero(); q * t];
                            gemm(Trans::N, Trans::N, q, t, kk, T::one(), &wb[ci * q * kk..], kk, &s, t, T::zero(), szc, t);
                            gemm(Trans::N, Trans::N, q, t, kk, T::one(), &wl[ci * q * kk..], kk, &g, t, T::zero(), &mut b, t);
                            for (a, &bv) in szc.iter_mut().zip(&b) {
                                *a *= bv;
                            }
                        }
                        ProductMode::PerElement => {
                            for (gv, &uv) in g.iter_mut().zip(&u) {
                                *gv *= silu(uv);
                            }
                            gemm(Trans::N, Trans::N, q, t, kk, T::one(), &weff[ci * q * kk..], kk, &g, t, T::zero(), szc, t);
                        }
                    }
                    for (qi, row) in szc.chunks_mut(t).enumerate() {
                        let (s, b) = (scale[ci * q + qi], shift[ci * q + qi]);
                        row.iter_mut().for_each(|v| *v = silu(*v * s + b));
                    }
                });
                let o = &mut o[..c * t];
                match self.cfg.outer {
                    OuterMode::Dense => par_gemm(Trans::N, Trans::N, c, t, c * q, T::one(), wo, c * q, sz, t, T::zero(), o, t),
                    OuterMode::PerChannel => parallel::for_each_chunk_mut(o, t, |ci, oc| {
                        gemm(Trans::N, Trans::N, 1, t, q, T::one(), &wo[ci * q..], q, &sz[ci * q * t..], t, T::zero(), oc, t);
                    }),
                }
                let y = &mut y[..c_out * t];
                for (row, &b) in y.chunks_mut(t).zip(self.b_mix.data()) {
                    row.iter_mut().for_each(|v| *v = b);
                }
                par_gemm(Trans::N, Trans::N, c_out, t, c, T::one(), self.w_mix.data(), c, o, t, T::one(), y, t);
                for (co, row) in y.chunks(t).enumerate() {
                    out[(ni * c_out + co) * l + l0..(ni * c_out + co) * l + l0 + t].copy_from_slice(row);
                }
            }
        }
        Ok(Tensor::from_parts(vec![n, c_out, p.ho, p.wo], out))
    }
}
