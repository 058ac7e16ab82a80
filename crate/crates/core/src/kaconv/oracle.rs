//! Direct nested-loop evaluation of a KA layer, for testing the fast path.

use super::{KaConv, OuterMode, ProductMode};
use crate::activations::silu;
use crate::error::{ensure, Result};
use crate::ops::norm::{Mode, BN_EPS};
use crate::tensor::Tensor;

/// Evaluates `layer` on `x` with explicit loops over sample, channel, outer
/// term, output location and patch position. No unfold, reshape or matrix
/// product is involved. Intended for small inputs only.
pub fn kaconv_reference_oracle(layer: &KaConv<f64>, x: &Tensor<f64>, mode: Mode) -> Result<Tensor<f64>> {
    let cfg = layer.config();
    let (n, c, h, w) = x.dims4()?;
    ensure!(c == cfg.c_in, Dimension, "KA layer expects {} input channels, got {c}", cfg.c_in);
    let spec = cfg.spec();
    let (ho, wo) = spec.out_hw(h, w)?;
    let (k, q, c_out) = (cfg.kernel, cfg.q(), cfg.c_out);
    let pixel = |ni: usize, ci: usize, oy: usize, ox: usize, ky: usize, kx: usize| -> f64 {
        let iy = (oy * spec.stride + ky) as isize - spec.padding as isize;
        let ix = (ox * spec.stride + kx) as isize - spec.padding as isize;
        if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
            0.0
        } else {
            x.data()[((ni * c + ci) * h + iy as usize) * w + ix as usize]
        }
    };
    let wb = |ci: usize, qi: usize, ky: usize, kx: usize| layer.w_base.data()[((ci * q + qi) * k + ky) * k + kx];
    let wl = |ci: usize, qi: usize, ky: usize, kx: usize| layer.w_learn.data()[(ci * q + qi) * k * k + ky * k + kx];

    // Products p[n][c·q][oy][ox].
    let mut prod = vec![0.0; n * c * q * ho * wo];
    let at = |ni: usize, cq: usize, oy: usize, ox: usize| ((ni * c * q + cq) * ho + oy) * wo + ox;
    for ni in 0..n {
        for ci in 0..c {
            for qi in 0..q {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let (mut a, mut b, mut pe) = (0.0, 0.0, 0.0);
                        for ky in 0..k {
                            for kx in 0..k {
                                let v = pixel(ni, ci, oy, ox, ky, kx);
                                let phi = layer.act.eval(ci, v);
                                a += wb(ci, qi, ky, kx) * silu(v);
                                b += wl(ci, qi, ky, kx) * phi;
                                pe += wb(ci, qi, ky, kx) * wl(ci, qi, ky, kx) * silu(v) * phi;
                            }
                        }
                        prod[at(ni, ci * q + qi, oy, ox)] = match cfg.product {
                            ProductMode::AfterAggregation => a * b,
                            ProductMode::PerElement => pe,
                        };
                    }
                }
            }
        }
    }

    // Normalization statistics per product channel.
    let count = (n * ho * wo) as f64;
    let mut act = vec![0.0; prod.len()];
    for cq in 0..c * q {
        let (mean, var) = match mode {
            Mode::Train => {
                let mut s = 0.0;
                for ni in 0..n {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            s += prod[at(ni, cq, oy, ox)];
                        }
                    }
                }
                let mean = s / count;
                let mut v = 0.0;
                for ni in 0..n {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            v += (prod[at(ni, cq, oy, ox)] - mean).powi(2);
                        }
                    }
                }
                (mean, v / count)
            }
            Mode::Eval => (layer.norm.running_mean.data()[cq], layer.norm.running_var.data()[cq]),
        };
        let (g, b) = (layer.norm.gamma.data()[cq], layer.norm.beta.data()[cq]);
        for ni in 0..n {
            for oy in 0..ho {
                for ox in 0..wo {
                    let i = at(ni, cq, oy, ox);
                    act[i] = silu(g * (prod[i] - mean) / (var + BN_EPS).sqrt() + b);
                }
            }
        }
    }

    // Outer and mixing stages.
    let wout = layer.w_outer.data();
    let mut y = vec![0.0; n * c_out * ho * wo];
    for ni in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut o = vec![0.0; c];
                for (ci, ov) in o.iter_mut().enumerate() {
                    match cfg.outer {
                        OuterMode::Dense => {
                            for cq in 0..c * q {
                                *ov += wout[ci * c * q + cq] * act[at(ni, cq, oy, ox)];
                            }
                        }
                        OuterMode::PerChannel => {
                            for qi in 0..q {
                                *ov += wout[ci * q + qi] * act[at(ni, ci * q + qi, oy, ox)];
                            }
                        }
                    }
                }
                for co in 0..c_out {
                    let mut v = layer.b_mix.data()[co];
                    for (ci, &ov) in o.iter().enumerate() {
                        v += layer.w_mix.data()[co * c + ci] * ov;
                    }
                    y[((ni * c_out + co) * ho + oy) * wo + ox] = v;
                }
            }
        }
    }
    Tensor::new(vec![n, c_out, ho, wo], y)
}
