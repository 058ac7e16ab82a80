use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.99, eps: 1e-8, weight_decay: 1e-4 }
    }
}

/// Adam with decoupled weight decay. Moments mirror the parameter shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T: Scalar> {
    pub cfg: AdamWConfig,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new<'a>(cfg: AdamWConfig, params: impl IntoIterator<Item = &'a Tensor<T>>) -> Self {
        let m: Vec<Tensor<T>> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self { cfg, step: 0, v: m.clone(), m }
    }

    /// One update at learning rate `lr`. `decay[i]` selects weight decay for
    /// parameter `i`. Every gradient is checked before anything changes, so a
    /// non-finite gradient leaves parameters and state untouched.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[Tensor<T>], decay: &[bool], names: &[String], lr: f64) -> Result<()> {
        let n = self.m.len();
        ensure!(
            params.len() == n && grads.len() == n && decay.len() == n && names.len() == n,
            Contract,
            "optimizer tracks {n} tensors, got {} params, {} grads, {} decay flags, {} names",
            params.len(),
            grads.len(),
            decay.len(),
            names.len()
        );
        for i in 0..n {
            ensure!(
                params[i].shape() == grads[i].shape() && self.m[i].shape() == grads[i].shape(),
                Contract,
                "`{}`: parameter {:?}, gradient {:?}, state {:?}",
                names[i],
                params[i].shape(),
                grads[i].shape(),
                self.m[i].shape()
            );
            if !grads[i].is_finite() {
                return Err(Error::NonFiniteGradient(names[i].clone()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c = &self.cfg;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
        let bc1 = T::lit(1.0 - c.beta1.powi(t));
        let bc2 = T::lit(1.0 - c.beta2.powi(t));
        let eps = T::lit(c.eps);
        let lr_t = T::lit(lr);
        let shrink = T::lit(1.0 - lr * c.weight_decay);
        for i in 0..n {
            let p = params[i].data_mut();
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for j in 0..p.len() {
                let g = grads[i].data()[j];
                if decay[i] {
                    p[j] *= shrink;
                }
                m[j] = b1 * m[j] + one_b1 * g;
                v[j] = b2 * v[j] + one_b2 * g * g;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                p[j] -= lr_t * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> AdamW<U> {
        AdamW {
            cfg: self.cfg,
            step: self.step,
            m: self.m.iter().map(|t| t.cast()).collect(),
            v: self.v.iter().map(|t| t.cast()).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("p{i}")).collect()
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut p = Tensor::new(vec![3], vec![1.0, -2.0, 3.0]).unwrap();
        let before = p.clone();
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..Default::default() }, [&p]);
        for _ in 0..5 {
            opt.step(&mut [&mut p], &[Tensor::zeros(&[3])], &[true], &names(1), 1e-2).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        for g in [3.0, -0.25] {
            let mut p = Tensor::new(vec![1], vec![0.5]).unwrap();
            let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..Default::default() }, [&p]);
            let lr = 1e-3;
            opt.step(&mut [&mut p], &[Tensor::new(vec![1], vec![g]).unwrap()], &[true], &names(1), lr).unwrap();
            // m̂ = g and v̂ = g², so the update is −lr·g/(|g| + ε).
            let expect = 0.5 - lr * g / (g.abs() + 1e-8);
            assert!((p.data()[0] - expect).abs() < 1e-15);
            assert!((p.data()[0] - (0.5 - lr * g.signum())).abs() < 1e-10);
        }
    }

    #[test]
    fn decoupled_decay_touches_only_flagged_tensors() {
        let w0 = Tensor::new(vec![2], vec![0.7, -1.3]).unwrap();
        let b0 = Tensor::new(vec![2], vec![0.2, 0.4]).unwrap();
        let (mut w, mut b) = (w0.clone(), b0.clone());
        let cfg = AdamWConfig { weight_decay: 0.1, ..Default::default() };
        let mut opt = AdamW::new(cfg, [&w, &b]);
        let lr = 0.05;
        let zeros = [Tensor::zeros(&[2]), Tensor::zeros(&[2])];
        let mut expect = w0.clone();
        for _ in 0..3 {
            opt.step(&mut [&mut w, &mut b], &zeros, &[true, false], &names(2), lr).unwrap();
            expect = expect.map(|v| v * (1.0 - lr * 0.1));
        }
        assert_eq!(w, expect);
        assert_eq!(b, b0);
    }

    #[test]
    fn converges_on_a_quadratic() {
        // f(x) = Σ a_i (x_i − c_i)², minimized at c.
        let a = [1.0, 4.0, 0.5];
        let c = [0.3, -1.2, 2.0];
        let mut x: Tensor<f64> = Tensor::zeros(&[3]);
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..Default::default() }, [&x]);
        for s in 0..400 {
            let g = Tensor::from_fn(&[3], |i| 2.0 * a[i] * (x.data()[i] - c[i]));
            let lr = 0.1 * (1.0 - s as f64 / 400.0) + 1e-4;
            opt.step(&mut [&mut x], &[g], &[false], &names(1), lr).unwrap();
        }
        for i in 0..3 {
            assert!((x.data()[i] - c[i]).abs() < 1e-3, "{:?}", x.data());
        }
    }

    #[test]
    fn non_finite_gradient_aborts_without_changes() {
        let mut p = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let mut q = Tensor::new(vec![1], vec![3.0]).unwrap();
        let mut opt = AdamW::new(AdamWConfig::default(), [&p, &q]);
        let grads = [Tensor::new(vec![2], vec![1.0, 1.0]).unwrap(), Tensor::new(vec![1], vec![f64::NAN]).unwrap()];
        let err = opt.step(&mut [&mut p, &mut q], &grads, &[true, true], &names(2), 0.1).unwrap_err();
        assert!(matches!(&err, Error::NonFiniteGradient(n) if n == "p1"), "{err}");
        assert_eq!(p.data(), [1.0, 2.0]);
        assert_eq!(opt.step, 0);
    }
}
