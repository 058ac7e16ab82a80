//! Spatial pooling.

use crate::error::{ensure, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `[N, C, H, W] -> [N, C]` mean over the spatial axes.
pub fn global_avg_pool_fwd<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    let l = h * w;
    let inv = T::lit(1.0 / l as f64);
    let out = x.data().chunks(l).map(|p| p.iter().copied().sum::<T>() * inv).collect();
    Ok(Tensor::from_parts(vec![n, c], out))
}

/// Spreads `[N, C]` gradients evenly over `H×W`.
pub fn global_avg_pool_bwd<T: Scalar>(gy: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let (n, c) = gy.dims2()?;
    let inv = T::lit(1.0 / (h * w) as f64);
    let mut out = Vec::with_capacity(n * c * h * w);
    for &g in gy.data() {
        out.extend(std::iter::repeat_n(g * inv, h * w));
    }
    Ok(Tensor::from_parts(vec![n, c, h, w], out))
}

/// Argmax positions of a 2×2, stride-2 max pool.
#[derive(Clone, Debug)]
pub struct MaxPoolCache {
    in_shape: [usize; 4],
    argmax: Vec<usize>,
}

/// 2×2 max pool with stride 2 (odd trailing rows/columns are dropped).
pub fn max_pool2_fwd<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, MaxPoolCache)> {
    let (n, c, h, w) = x.dims4()?;
    ensure!(h >= 2 && w >= 2, Dimension, "max pool needs at least 2×2 input, got {h}×{w}");
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut argmax = Vec::with_capacity(n * c * ho * wo);
    let xs = x.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if xs[i] > xs[best] {
                        best = i;
                    }
                }
                out.push(xs[best]);
                argmax.push(best);
            }
        }
    }
    Ok((Tensor::from_parts(vec![n, c, ho, wo], out), MaxPoolCache { in_shape: [n, c, h, w], argmax }))
}

pub fn max_pool2_bwd<T: Scalar>(gy: &Tensor<T>, cache: &MaxPoolCache) -> Result<Tensor<T>> {
    ensure!(gy.len() == cache.argmax.len(), Contract, "max pool gradient has {} elements, expected {}", gy.len(), cache.argmax.len());
    let mut gx = Tensor::zeros(&cache.in_shape);
    let d = gx.data_mut();
    for (&g, &i) in gy.data().iter().zip(&cache.argmax) {
        d[i] += g;
    }
    Ok(gx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn average_pool_round_trip() {
        let x = Tensor::<f64>::from_fn(&[1, 2, 2, 2], |i| i as f64);
        let y = global_avg_pool_fwd(&x).unwrap();
        assert_eq!(y.data(), &[1.5, 5.5]);
        let g = global_avg_pool_bwd(&Tensor::new(vec![1, 2], vec![4.0, 8.0]).unwrap(), 2, 2).unwrap();
        assert_eq!(g.data(), &[1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn max_pool_routes_gradient_to_argmax() {
        let x = Tensor::<f64>::new(vec![1, 1, 2, 4], vec![1.0, 5.0, 2.0, 0.0, 3.0, 4.0, 7.0, 1.0]).unwrap();
        let (y, cache) = max_pool2_fwd(&x).unwrap();
        assert_eq!(y.data(), &[5.0, 7.0]);
        let g = max_pool2_bwd(&Tensor::new(vec![1, 1, 1, 2], vec![1.0, 2.0]).unwrap(), &cache).unwrap();
        assert_eq!(g.data(), &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 2.0, 0.0]);
    }
}
