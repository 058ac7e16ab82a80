//! Pointwise products, sums and simple nonlinearities with their gradients.

use crate::error::{ensure, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub fn mul_fwd<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.zip_map(b, |x, y| x * y)
}

/// `(da, db)` of `a ⊙ b`.
pub fn mul_bwd<T: Scalar>(gy: &Tensor<T>, a: &Tensor<T>, b: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    Ok((gy.zip_map(b, |g, y| g * y)?, gy.zip_map(a, |g, x| g * x)?))
}

pub fn add_fwd<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.zip_map(b, |x, y| x + y)
}

pub fn relu_fwd<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.max(T::zero()))
}

/// Gradient of ReLU, taking 0 at the kink.
pub fn relu_bwd<T: Scalar>(gy: &Tensor<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    gy.zip_map(x, |g, v| if v > T::zero() { g } else { T::zero() })
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid_fwd<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid)
}

/// Gradient of the sigmoid given its output `y`.
pub fn sigmoid_bwd<T: Scalar>(gy: &Tensor<T>, y: &Tensor<T>) -> Result<Tensor<T>> {
    gy.zip_map(y, |g, s| g * s * (T::one() - s))
}

/// `y[n, c, :] = x[n, c, :] · s[n, c]` for `x: [N, C, H, W]`, `s: [N, C]`.
pub fn scale_channels_fwd<T: Scalar>(x: &Tensor<T>, s: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    ensure!(s.shape() == [n, c], Dimension, "channel scale shape {:?} != [{n}, {c}]", s.shape());
    let l = h * w;
    let mut out = x.data().to_vec();
    for (plane, &k) in out.chunks_mut(l).zip(s.data()) {
        plane.iter_mut().for_each(|v| *v *= k);
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// `(dx, ds)` of [`scale_channels_fwd`].
pub fn scale_channels_bwd<T: Scalar>(gy: &Tensor<T>, x: &Tensor<T>, s: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    ensure!(gy.shape() == x.shape(), Contract, "gradient shape {:?} != input {:?}", gy.shape(), x.shape());
    let (_, _, h, w) = x.dims4()?;
    let l = h * w;
    let gx = scale_channels_fwd(gy, s)?;
    let gs = gy
        .data()
        .chunks(l)
        .zip(x.data().chunks(l))
        .map(|(g, v)| g.iter().zip(v).map(|(&a, &b)| a * b).sum())
        .collect();
    Ok((gx, Tensor::from_parts(s.shape().to_vec(), gs)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_is_stable_and_symmetric() {
        for &x in &[-800.0f64, -3.0, 0.0, 2.5, 800.0] {
            let s = sigmoid(x);
            assert!(s.is_finite());
            assert!((s + sigmoid(-x) - 1.0).abs() < 1e-15);
        }
        assert_eq!(sigmoid(0.0f64), 0.5);
    }

    #[test]
    fn product_gradients_swap_operands() {
        let a = Tensor::<f64>::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let b = Tensor::new(vec![3], vec![-1.0, 0.5, 2.0]).unwrap();
        let g = Tensor::new(vec![3], vec![1.0, 1.0, 2.0]).unwrap();
        let (da, db) = mul_bwd(&g, &a, &b).unwrap();
        assert_eq!(da.data(), &[-1.0, 0.5, 4.0]);
        assert_eq!(db.data(), &[1.0, 2.0, 6.0]);
    }

    #[test]
    fn channel_scale_gradient() {
        let x = Tensor::<f64>::from_fn(&[1, 2, 1, 2], |i| i as f64 + 1.0);
        let s = Tensor::new(vec![1, 2], vec![2.0, -1.0]).unwrap();
        assert_eq!(scale_channels_fwd(&x, &s).unwrap().data(), &[2.0, 4.0, -3.0, -4.0]);
        let (gx, gs) = scale_channels_bwd(&Tensor::ones(&[1, 2, 1, 2]), &x, &s).unwrap();
        assert_eq!(gx.data(), &[2.0, 2.0, -1.0, -1.0]);
        assert_eq!(gs.data(), &[3.0, 7.0]);
    }
}
