//! Fully connected layer `y = x·Wᵀ + b`.

use crate::error::{ensure, Result};
use crate::scalar::{par_gemm, Scalar, Trans};
use crate::tensor::Tensor;

/// `x: [N, In]`, `w: [Out, In]`, `b: [Out]`.
pub fn linear_fwd<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let (n, fin) = x.dims2()?;
    let (fout, fin_w) = w.dims2()?;
    ensure!(fin == fin_w, Dimension, "linear input has {fin} features, weight expects {fin_w}");
    let mut y = vec![T::zero(); n * fout];
    if let Some(b) = b {
        ensure!(b.shape() == [fout], Dimension, "bias shape {:?} != [{fout}]", b.shape());
        for row in y.chunks_mut(fout) {
            row.copy_from_slice(b.data());
        }
    }
    par_gemm(Trans::N, Trans::T, n, fout, fin, T::one(), x.data(), fin, w.data(), fin, T::one(), &mut y, fout);
    Ok(Tensor::from_parts(vec![n, fout], y))
}

/// Gradients `(dx, dw, db)` of [`linear_fwd`].
pub fn linear_bwd<T: Scalar>(
    gy: &Tensor<T>,
    x: &Tensor<T>,
    w: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, fin) = x.dims2()?;
    let (fout, _) = w.dims2()?;
    ensure!(gy.shape() == [n, fout], Contract, "linear gradient shape {:?} != [{n}, {fout}]", gy.shape());
    let mut gx = vec![T::zero(); n * fin];
    par_gemm(Trans::N, Trans::N, n, fin, fout, T::one(), gy.data(), fout, w.data(), fin, T::zero(), &mut gx, fin);
    let mut gw = vec![T::zero(); fout * fin];
    par_gemm(Trans::T, Trans::N, fout, fin, n, T::one(), gy.data(), fout, x.data(), fin, T::zero(), &mut gw, fin);
    let mut gb = vec![T::zero(); fout];
    for row in gy.data().chunks(fout) {
        for (a, &g) in gb.iter_mut().zip(row) {
            *a += g;
        }
    }
    Ok((
        Tensor::from_parts(vec![n, fin], gx),
        Tensor::from_parts(vec![fout, fin], gw),
        Tensor::from_parts(vec![fout], gb),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forward_and_backward_by_hand() {
        let x = Tensor::<f64>::new(vec![2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.0, 1.0]).unwrap();
        let w = Tensor::new(vec![2, 3], vec![1.0, 0.0, -1.0, 0.5, 0.5, 0.5]).unwrap();
        let b = Tensor::new(vec![2], vec![0.1, -0.1]).unwrap();
        let y = linear_fwd(&x, &w, Some(&b)).unwrap();
        assert_eq!(y.data(), &[-1.9, 2.9, -1.9, -0.1]);
        let gy = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 2.0]).unwrap();
        let (gx, gw, gb) = linear_bwd(&gy, &x, &w).unwrap();
        assert_eq!(gx.data(), &[1.0, 0.0, -1.0, 1.0, 1.0, 1.0]);
        assert_eq!(gw.data(), &[1.0, 2.0, 3.0, -2.0, 0.0, 2.0]);
        assert_eq!(gb.data(), &[1.0, 2.0]);
    }
}
