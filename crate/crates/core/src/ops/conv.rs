//! Grouped 2D cross-correlation and the unfold (im2col) transform.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::parallel;
use crate::scalar::{gemm, Scalar, Trans};
use crate::tensor::Tensor;

/// Geometry of a square-kernel convolution with zero padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub fn new(kernel: usize, stride: usize, padding: usize, groups: usize) -> Self {
        Self { kernel, stride, padding, groups }
    }

    /// Padding `kernel / 2`, which keeps the spatial size at stride 1.
    pub fn same(kernel: usize, stride: usize, groups: usize) -> Self {
        Self::new(kernel, stride, kernel / 2, groups)
    }

    /// `floor((extent + 2p - K) / s) + 1`.
    pub fn out_extent(&self, extent: usize) -> Result<usize> {
        ensure!(self.kernel >= 1 && self.stride >= 1, Config, "kernel and stride must be >= 1: {self:?}");
        let padded = extent + 2 * self.padding;
        ensure!(
            padded >= self.kernel,
            Dimension,
            "input extent {extent} with padding {} is smaller than kernel {}",
            self.padding,
            self.kernel
        );
        Ok((padded - self.kernel) / self.stride + 1)
    }

    pub fn out_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        Ok((self.out_extent(h)?, self.out_extent(w)?))
    }

    pub fn validate_channels(&self, c_in: usize, c_out: usize) -> Result<()> {
        ensure!(self.groups >= 1, Config, "groups must be >= 1");
        ensure!(
            c_in.is_multiple_of(self.groups) && c_out.is_multiple_of(self.groups),
            Config,
            "channels {c_in} -> {c_out} not divisible by groups {}",
            self.groups
        );
        Ok(())
    }
}

/// Patch geometry shared by the im2col/col2im kernels.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Patches {
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl Patches {
    pub fn new(h: usize, w: usize, spec: &ConvSpec) -> Result<Self> {
        let (ho, wo) = spec.out_hw(h, w)?;
        Ok(Self { h, w, k: spec.kernel, stride: spec.stride, pad: spec.padding, ho, wo })
    }

    pub fn kk(&self) -> usize {
        self.k * self.k
    }

    pub fn l(&self) -> usize {
        self.ho * self.wo
    }

    /// Input row/column for output location `(oy, ox)` and patch offset `(ky, kx)`, if inside the image.
    #[inline]
    pub(crate) fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
        if iy < 0 || ix < 0 || iy >= self.h as isize || ix >= self.w as isize {
            None
        } else {
            Some(iy as usize * self.w + ix as usize)
        }
    }
}

/// Writes the `K²×L` patch matrix of one plane; row `kk` starts at `dst[kk * ld]`.
#[inline]
pub(crate) fn im2col_plane<T: Scalar>(p: &Patches, plane: &[T], dst: &mut [T], ld: usize) {
    for ky in 0..p.k {
        for kx in 0..p.k {
            let row = &mut dst[(ky * p.k + kx) * ld..(ky * p.k + kx) * ld + p.l()];
            for oy in 0..p.ho {
                for ox in 0..p.wo {
                    row[oy * p.wo + ox] = match p.source(oy, ox, ky, kx) {
                        Some(i) => plane[i],
                        None => T::zero(),
                    };
                }
            }
        }
    }
}

/// Adds the `K²×L` patch-gradient matrix back onto its source plane.
#[inline]
pub(crate) fn col2im_plane_add<T: Scalar>(p: &Patches, cols: &[T], ld: usize, plane: &mut [T]) {
    for ky in 0..p.k {
        for kx in 0..p.k {
            let row = &cols[(ky * p.k + kx) * ld..(ky * p.k + kx) * ld + p.l()];
            for oy in 0..p.ho {
                for ox in 0..p.wo {
                    if let Some(i) = p.source(oy, ox, ky, kx) {
                        plane[i] += row[oy * p.wo + ox];
                    }
                }
            }
        }
    }
}

/// Sliding `K×K` patches of every channel: `[N, C, H, W] -> [N, C, K², L]`.
///
/// Element `[n, c, k, l]` is patch position `k` (row-major over the patch) of
/// output location `l` (row-major over `H'×W'`); positions in the zero padding
/// are 0. Unfold is per channel, so `spec.groups` must equal `C`.
pub fn unfold<T: Scalar>(x: &Tensor<T>, spec: &ConvSpec) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    ensure!(spec.groups == c, Dimension, "unfold is per channel: groups {} != channels {c}", spec.groups);
    let p = Patches::new(h, w, spec)?;
    let (kk, l) = (p.kk(), p.l());
    let mut out = vec![T::zero(); n * c * kk * l];
    let src = x.data();
    parallel::for_each_chunk_mut(&mut out, kk * l, |plane_idx, dst| {
        im2col_plane(&p, &src[plane_idx * h * w..(plane_idx + 1) * h * w], dst, l);
    });
    Ok(Tensor::from_parts(vec![n, c, kk, l], out))
}

/// Everything the convolution backward pass needs.
#[derive(Clone, Debug)]
pub struct ConvCache<T: Scalar> {
    x: Tensor<T>,
    w: Tensor<T>,
    spec: ConvSpec,
    has_bias: bool,
    out_shape: [usize; 4],
}

impl<T: Scalar> ConvCache<T> {
    pub fn input(&self) -> &Tensor<T> {
        &self.x
    }
}

/// Gradients of a convolution.
#[derive(Clone, Debug)]
pub struct ConvGrads<T: Scalar> {
    pub x: Tensor<T>,
    pub w: Tensor<T>,
    pub b: Option<Tensor<T>>,
}

/// Upper bound on the im2col buffer of one sample chunk (elements).
const COLS_BUDGET: usize = 1 << 22;
/// Upper bound on sample chunks, which bounds the weight-gradient partials.
const MAX_CHUNKS: usize = 8;

/// Fixed split of the batch into sample ranges; depends only on shapes.
///
/// Uses enough chunks to keep each im2col buffer under budget, and at least
/// `min(N, MAX_CHUNKS)` so the work spreads over threads.
pub(crate) fn sample_chunks(n: usize, per_sample: usize) -> Vec<std::ops::Range<usize>> {
    let per_chunk = (COLS_BUDGET / per_sample.max(1)).max(1);
    let parts = n.div_ceil(per_chunk).max(n.min(MAX_CHUNKS));
    parallel::partition(n, parts)
}

fn check_conv_shapes<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<(usize, usize, usize, usize, usize, Patches)> {
    let (n, c_in, h, wd) = x.dims4()?;
    let (c_out, cg, kh, kw) = w.dims4()?;
    spec.validate_channels(c_in, c_out)?;
    ensure!(
        cg == c_in / spec.groups && kh == spec.kernel && kw == spec.kernel,
        Dimension,
        "weight shape {:?} does not match input channels {c_in}, groups {}, kernel {}",
        w.shape(),
        spec.groups,
        spec.kernel
    );
    if let Some(b) = b {
        ensure!(b.shape() == [c_out], Dimension, "bias shape {:?} != [{c_out}]", b.shape());
    }
    let p = Patches::new(h, wd, spec)?;
    Ok((n, c_in, c_out, cg, c_out / spec.groups, p))
}

/// Grouped cross-correlation (no kernel flip) with optional per-channel bias.
///
/// `x: [N, C_in, H, W]`, `w: [C_out, C_in/g, K, K]`, `b: [C_out]`.
pub fn conv2d_grouped_fwd<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<(Tensor<T>, ConvCache<T>)> {
    let y = conv2d_forward(x, w, b, spec)?;
    let (n, c_out, ho, wo) = y.dims4()?;
    let cache = ConvCache {
        x: x.clone(),
        w: w.clone(),
        spec: *spec,
        has_bias: b.is_some(),
        out_shape: [n, c_out, ho, wo],
    };
    Ok((y, cache))
}

/// Forward pass without keeping a cache.
pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    let (n, c_in, c_out, cg, cog, p) = check_conv_shapes(x, w, b, spec)?;
    let (h, wd, kk, l) = (p.h, p.w, p.kk(), p.l());
    let mut out = vec![T::zero(); n * c_out * l];
    let xs = x.data();
    let ws = w.data();

    if cg == 1 {
        // Depthwise-style: each output plane reads a single input plane.
        parallel::for_each_chunk_mut(&mut out, l, |plane, dst| {
            let (ni, co) = (plane / c_out, plane % c_out);
            let ci = co / cog;
            let src = &xs[(ni * c_in + ci) * h * wd..(ni * c_in + ci + 1) * h * wd];
            let wk = &ws[co * kk..(co + 1) * kk];
            direct_plane(&p, src, wk, dst);
        });
    } else {
        let chunks = sample_chunks(n, cg * kk * l);
        let chunk_outs = parallel::map_indices(chunks.len(), |ci| {
            let r = chunks[ci].clone();
            let nb = r.len();
            let ld = nb * l;
            let mut cols = vec![T::zero(); cg * kk * ld];
            let mut tmp = vec![T::zero(); cog * ld];
            let mut part = vec![T::zero(); nb * c_out * l];
            for g in 0..spec.groups {
                for (j, ni) in r.clone().enumerate() {
                    for c in 0..cg {
                        let plane = &xs[(ni * c_in + g * cg + c) * h * wd..(ni * c_in + g * cg + c + 1) * h * wd];
                        im2col_plane(&p, plane, &mut cols[c * kk * ld + j * l..], ld);
                    }
                }
                gemm(Trans::N, Trans::N, cog, ld, cg * kk, T::one(), &ws[g * cog * cg * kk..], cg * kk, &cols, ld, T::zero(), &mut tmp, ld);
                for o in 0..cog {
                    for j in 0..nb {
                        let dst = &mut part[(j * c_out + g * cog + o) * l..(j * c_out + g * cog + o + 1) * l];
                        dst.copy_from_slice(&tmp[o * ld + j * l..o * ld + (j + 1) * l]);
                    }
                }
            }
            part
        });
        let mut off = 0;
        for part in chunk_outs {
            out[off..off + part.len()].copy_from_slice(&part);
            off += part.len();
        }
    }

    if let Some(b) = b {
        let bs = b.data();
        for (plane, dst) in out.chunks_mut(l).enumerate() {
            let bias = bs[plane % c_out];
            dst.iter_mut().for_each(|v| *v += bias);
        }
    }
    Ok(Tensor::from_parts(vec![n, c_out, p.ho, p.wo], out))
}

fn direct_plane<T: Scalar>(p: &Patches, src: &[T], wk: &[T], dst: &mut [T]) {
    for oy in 0..p.ho {
        for ox in 0..p.wo {
            let mut acc = T::zero();
            for ky in 0..p.k {
                for kx in 0..p.k {
                    if let Some(i) = p.source(oy, ox, ky, kx) {
                        acc += wk[ky * p.k + kx] * src[i];
                    }
                }
            }
            dst[oy * p.wo + ox] = acc;
        }
    }
}

/// Exact gradients of [`conv2d_grouped_fwd`].
pub fn conv2d_grouped_bwd<T: Scalar>(grad_y: &Tensor<T>, cache: &ConvCache<T>) -> Result<ConvGrads<T>> {
    ensure!(
        grad_y.shape() == cache.out_shape,
        Contract,
        "grad_y shape {:?} does not match the cached forward output {:?}",
        grad_y.shape(),
        cache.out_shape
    );
    conv2d_backward(&cache.x, &cache.w, cache.has_bias, &cache.spec, grad_y)
}

pub(crate) fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    has_bias: bool,
    spec: &ConvSpec,
    grad_y: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let (n, c_in, c_out, cg, cog, p) = check_conv_shapes(x, w, None, spec)?;
    ensure!(
        grad_y.shape() == [n, c_out, p.ho, p.wo],
        Contract,
        "grad_y shape {:?} != forward output [{n}, {c_out}, {}, {}]",
        grad_y.shape(),
        p.ho,
        p.wo
    );
    let (h, wd, kk, l) = (p.h, p.w, p.kk(), p.l());
    let xs = x.data();
    let ws = w.data();
    let gy = grad_y.data();

    let gb = has_bias.then(|| {
        let mut gb = vec![T::zero(); c_out];
        for ni in 0..n {
            for (co, g) in gb.iter_mut().enumerate() {
                *g += gy[(ni * c_out + co) * l..(ni * c_out + co + 1) * l].iter().copied().sum::<T>();
            }
        }
        Tensor::from_parts(vec![c_out], gb)
    });

    let mut gx = vec![T::zero(); n * c_in * h * wd];
    let mut gw = vec![T::zero(); w.len()];

    if cg == 1 {
        // Input gradient: one task per (sample, input channel).
        parallel::for_each_chunk_mut(&mut gx, h * wd, |plane, dst| {
            let (ni, ci) = (plane / c_in, plane % c_in);
            let g = ci; // cg == 1 so group index == input channel
            for o in 0..cog {
                let co = g * cog + o;
                let gyp = &gy[(ni * c_out + co) * l..(ni * c_out + co + 1) * l];
                let wk = &ws[co * kk..(co + 1) * kk];
                for oy in 0..p.ho {
                    for ox in 0..p.wo {
                        let gv = gyp[oy * p.wo + ox];
                        for ky in 0..p.k {
                            for kx in 0..p.k {
                                if let Some(i) = p.source(oy, ox, ky, kx) {
                                    dst[i] += wk[ky * p.k + kx] * gv;
                                }
                            }
                        }
                    }
                }
            }
        });
        // Weight gradient: one task per output channel, samples summed in order.
        parallel::for_each_chunk_mut(&mut gw, kk, |co, dst| {
            let ci = co / cog;
            for ni in 0..n {
                let src = &xs[(ni * c_in + ci) * h * wd..(ni * c_in + ci + 1) * h * wd];
                let gyp = &gy[(ni * c_out + co) * l..(ni * c_out + co + 1) * l];
                for ky in 0..p.k {
                    for kx in 0..p.k {
                        let mut acc = T::zero();
                        for oy in 0..p.ho {
                            for ox in 0..p.wo {
                                if let Some(i) = p.source(oy, ox, ky, kx) {
                                    acc += gyp[oy * p.wo + ox] * src[i];
                                }
                            }
                        }
                        dst[ky * p.k + kx] += acc;
                    }
                }
            }
        });
    } else {
        let chunks = sample_chunks(n, cg * kk * l);
        let results = parallel::map_indices(chunks.len(), |chunk_idx| {
            let r = chunks[chunk_idx].clone();
            let nb = r.len();
            let ld = nb * l;
            let mut cols = vec![T::zero(); cg * kk * ld];
            let mut gcols = vec![T::zero(); cg * kk * ld];
            let mut gyg = vec![T::zero(); cog * ld];
            let mut gx_part = vec![T::zero(); nb * c_in * h * wd];
            let mut gw_part = vec![T::zero(); ws.len()];
            for g in 0..spec.groups {
                for (j, ni) in r.clone().enumerate() {
                    for c in 0..cg {
                        let plane = &xs[(ni * c_in + g * cg + c) * h * wd..(ni * c_in + g * cg + c + 1) * h * wd];
                        im2col_plane(&p, plane, &mut cols[c * kk * ld + j * l..], ld);
                    }
                    for o in 0..cog {
                        let src = &gy[(ni * c_out + g * cog + o) * l..(ni * c_out + g * cog + o + 1) * l];
                        gyg[o * ld + j * l..o * ld + (j + 1) * l].copy_from_slice(src);
                    }
                }
                let wg = &ws[g * cog * cg * kk..(g + 1) * cog * cg * kk];
                // dW_g = dY_g · colsᵀ
                gemm(Trans::N, Trans::T, cog, cg * kk, ld, T::one(), &gyg, ld, &cols, ld, T::zero(), &mut gw_part[g * cog * cg * kk..], cg * kk);
                // dcols = W_gᵀ · dY_g
                gemm(Trans::T, Trans::N, cg * kk, ld, cog, T::one(), wg, cg * kk, &gyg, ld, T::zero(), &mut gcols, ld);
                for j in 0..nb {
                    for c in 0..cg {
                        let plane = &mut gx_part[(j * c_in + g * cg + c) * h * wd..(j * c_in + g * cg + c + 1) * h * wd];
                        col2im_plane_add(&p, &gcols[c * kk * ld + j * l..], ld, plane);
                    }
                }
            }
            (gx_part, gw_part)
        });
        let mut off = 0;
        for (gx_part, gw_part) in results {
            gx[off..off + gx_part.len()].copy_from_slice(&gx_part);
            off += gx_part.len();
            for (a, b) in gw.iter_mut().zip(&gw_part) {
                *a += *b;
            }
        }
    }

    Ok(ConvGrads {
        x: Tensor::from_parts(x.shape().to_vec(), gx),
        w: Tensor::from_parts(w.shape().to_vec(), gw),
        b: gb,
    })
}

/// Multiply-accumulate count of a convolution producing `[C_out, H', W']` per sample.
pub fn conv_macs(c_in: usize, c_out: usize, spec: &ConvSpec, ho: usize, wo: usize) -> u64 {
    (spec.kernel * spec.kernel * (c_in / spec.groups) * c_out * ho * wo) as u64
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct six-loop cross-correlation.
    fn naive_conv(x: &Tensor, w: &Tensor, b: Option<&Tensor>, s: &ConvSpec) -> Tensor {
        let (n, c_in, h, wd) = x.dims4().unwrap();
        let (c_out, cg, k, _) = w.dims4().unwrap();
        let cog = c_out / s.groups;
        let (ho, wo) = s.out_hw(h, wd).unwrap();
        let mut y = Tensor::zeros(&[n, c_out, ho, wo]);
        for ni in 0..n {
            for co in 0..c_out {
                let g = co / cog;
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = b.map_or(0.0, |b| b.data()[co]);
                        for c in 0..cg {
                            let ci = g * cg + c;
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * s.stride + ky) as isize - s.padding as isize;
                                    let ix = (ox * s.stride + kx) as isize - s.padding as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        acc += w.data()[((co * cg + c) * k + ky) * k + kx]
                                            * x.data()[((ni * c_in + ci) * h + iy as usize) * wd + ix as usize];
                                    }
                                }
                            }
                        }
                        y.data_mut()[((ni * c_out + co) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        y
    }

    fn close(a: &Tensor, b: &Tensor, tol: f64) {
        assert_eq!(a.shape(), b.shape());
        let d = a.max_abs_diff(b);
        assert!(d < tol, "max abs diff {d}");
    }

    #[test]
    fn output_extent_law() {
        let s = ConvSpec::new(3, 2, 1, 1);
        assert_eq!(s.out_extent(32).unwrap(), 16);
        assert_eq!(s.out_extent(7).unwrap(), 4);
        assert_eq!(ConvSpec::new(3, 1, 0, 1).out_extent(3).unwrap(), 1);
        assert!(ConvSpec::new(5, 1, 0, 1).out_extent(3).is_err());
    }

    #[test]
    fn forward_matches_naive_over_configurations() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(c_in, c_out, k, stride, pad, groups) in &[
            (3, 4, 3, 1, 1, 1),
            (4, 6, 3, 2, 1, 2),
            (4, 4, 3, 1, 1, 4),
            (4, 8, 3, 2, 0, 4),
            (5, 3, 1, 1, 0, 1),
            (2, 2, 5, 2, 2, 1),
        ] {
            let s = ConvSpec::new(k, stride, pad, groups);
            let x = Tensor::uniform(&[2, c_in, 7, 6], -1.0, 1.0, &mut rng);
            let w = Tensor::uniform(&[c_out, c_in / groups, k, k], -1.0, 1.0, &mut rng);
            let b = Tensor::uniform(&[c_out], -1.0, 1.0, &mut rng);
            let (y, _) = conv2d_grouped_fwd(&x, &w, Some(&b), &s).unwrap();
            close(&y, &naive_conv(&x, &w, Some(&b), &s), 1e-12);
        }
    }

    #[test]
    fn backward_is_the_adjoint_of_forward() {
        // <dy, conv(x)> is bilinear, so the gradients follow from the naive oracle:
        // dL/dx_i = <dy, conv(e_i)> and dL/dw_j = <dy, conv_w(e_j)>.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for &(c_in, c_out, k, stride, pad, groups) in &[(2, 4, 3, 2, 1, 2), (3, 3, 3, 1, 1, 3), (2, 3, 3, 1, 0, 1)] {
            let s = ConvSpec::new(k, stride, pad, groups);
            let x = Tensor::uniform(&[2, c_in, 5, 4], -1.0, 1.0, &mut rng);
            let w = Tensor::uniform(&[c_out, c_in / groups, k, k], -1.0, 1.0, &mut rng);
            let b = Tensor::uniform(&[c_out], -1.0, 1.0, &mut rng);
            let (y, cache) = conv2d_grouped_fwd(&x, &w, Some(&b), &s).unwrap();
            let gy = Tensor::uniform(y.shape(), -1.0, 1.0, &mut rng);
            let g = conv2d_grouped_bwd(&gy, &cache).unwrap();
            for i in 0..x.len() {
                let mut e = Tensor::zeros(x.shape());
                e.data_mut()[i] = 1.0;
                let want = gy.dot(&naive_conv(&e, &w, None, &s)).unwrap();
                assert!((g.x.data()[i] - want).abs() < 1e-12);
            }
            for j in 0..w.len() {
                let mut e = Tensor::zeros(w.shape());
                e.data_mut()[j] = 1.0;
                let want = gy.dot(&naive_conv(&x, &e, None, &s)).unwrap();
                assert!((g.w.data()[j] - want).abs() < 1e-12);
            }
            let gb = g.b.unwrap();
            for co in 0..c_out {
                let want: f64 = (0..2).flat_map(|n| gy.data()[(n * c_out + co) * y.shape()[2] * y.shape()[3]..][..y.shape()[2] * y.shape()[3]].to_vec()).sum();
                assert!((gb.data()[co] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mismatched_gradient_is_a_contract_error() {
        let s = ConvSpec::same(3, 1, 1);
        let x = Tensor::<f64>::ones(&[1, 2, 4, 4]);
        let w = Tensor::<f64>::ones(&[2, 2, 3, 3]);
        let (_, cache) = conv2d_grouped_fwd(&x, &w, None, &s).unwrap();
        let bad = Tensor::<f64>::ones(&[1, 2, 3, 3]);
        assert!(matches!(conv2d_grouped_bwd(&bad, &cache), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn unfold_places_patches_with_zero_padding() {
        let x = Tensor::<f64>::from_fn(&[1, 2, 3, 3], |i| i as f64 + 1.0);
        let s = ConvSpec::same(3, 1, 2);
        let u = unfold(&x, &s).unwrap();
        assert_eq!(u.shape(), &[1, 2, 9, 9]);
        // Centre location (l = 4) of channel 0 sees the full 3×3 image.
        for k in 0..9 {
            assert_eq!(u.data()[k * 9 + 4], (k + 1) as f64);
        }
        // Top-left location: first row and column of the patch are padding.
        let tl: Vec<f64> = (0..9).map(|k| u.data()[k * 9]).collect();
        assert_eq!(tl, vec![0.0, 0.0, 0.0, 0.0, 1.0, 2.0, 0.0, 4.0, 5.0]);
        // Channel 1 is offset by 9.
        assert_eq!(u.data()[81 + 4 * 9 + 4], 14.0);
    }

    #[test]
    fn unfold_against_depthwise_conv() {
        // Summing patch k weighted by w_k reproduces a depthwise convolution.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = ConvSpec::new(3, 2, 1, 3);
        let x = Tensor::uniform(&[2, 3, 6, 5], -1.0, 1.0, &mut rng);
        let w = Tensor::uniform(&[3, 1, 3, 3], -1.0, 1.0, &mut rng);
        let u = unfold(&x, &s).unwrap();
        let y = naive_conv(&x, &w, None, &s);
        let l = y.shape()[2] * y.shape()[3];
        for n in 0..2 {
            for c in 0..3 {
                for li in 0..l {
                    let v: f64 = (0..9).map(|k| w.data()[c * 9 + k] * u.data()[((n * 3 + c) * 9 + k) * l + li]).sum();
                    assert!((v - y.data()[(n * 3 + c) * l + li]).abs() < 1e-12);
                }
            }
        }
    }
}
