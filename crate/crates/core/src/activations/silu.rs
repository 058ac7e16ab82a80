use crate::ops::elementwise::sigmoid;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `x·σ(x)`.
#[inline]
pub fn silu<T: Scalar>(x: T) -> T {
    x * sigmoid(x)
}

/// `σ(x)·(1 + x·(1 − σ(x)))`.
#[inline]
pub fn silu_grad<T: Scalar>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

pub fn silu_fwd<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(silu)
}

/// Gradient given the forward input `x`.
pub fn silu_bwd<T: Scalar>(gy: &Tensor<T>, x: &Tensor<T>) -> crate::Result<Tensor<T>> {
    gy.zip_map(x, |g, v| g * silu_grad(v))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixed_points_and_saturation() {
        assert_eq!(silu(0.0f64), 0.0);
        assert!((silu(30.0f64) - 30.0).abs() < 1e-9);
        assert!(silu(-40.0f64).abs() < 1e-15);
    }

    #[test]
    fn derivative_matches_finite_differences() {
        let h = 1e-5;
        for i in 0..200 {
            let x = -8.0 + 16.0 * (i as f64 * 0.618_033_988_75).fract();
            let fd = (silu(x + h) - silu(x - h)) / (2.0 * h);
            assert!((fd - silu_grad(x)).abs() < 1e-8, "x = {x}");
        }
    }
}
