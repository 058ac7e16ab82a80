use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Random crop from a zero-padded image plus horizontal flip.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub pad: usize,
    pub flip: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { pad: 4, flip: true }
    }
}

/// Shifts every plane of one sample by `(dy, dx) − pad`, filling with zero,
/// then mirrors it horizontally if `flip`.
pub fn crop_flip<T: Scalar>(sample: &[T], c: usize, h: usize, w: usize, pad: usize, dy: usize, dx: usize, flip: bool) -> Vec<T> {
    let mut out = vec![T::zero(); c * h * w];
    for ci in 0..c {
        for i in 0..h {
            let sy = (i + dy) as isize - pad as isize;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for j in 0..w {
                let sx = (j + dx) as isize - pad as isize;
                if sx < 0 || sx >= w as isize {
                    continue;
                }
                let oj = if flip { w - 1 - j } else { j };
                out[(ci * h + i) * w + oj] = sample[(ci * h + sy as usize) * w + sx as usize];
            }
        }
    }
    out
}

/// Applies an independent random crop and flip to each sample of `x`.
pub fn augment<T: Scalar, R: Rng + ?Sized>(x: &Tensor<T>, cfg: &AugmentConfig, rng: &mut R) -> Tensor<T> {
    let (n, c, h, w) = x.dims4().expect("augment takes [N, C, H, W]");
    let per = c * h * w;
    let mut out = Vec::with_capacity(x.len());
    for s in x.data().chunks(per).take(n) {
        let dy = rng.gen_range(0..=2 * cfg.pad);
        let dx = rng.gen_range(0..=2 * cfg.pad);
        let flip = cfg.flip && rng.gen_bool(0.5);
        out.extend(crop_flip(s, c, h, w, cfg.pad, dy, dx, flip));
    }
    Tensor::new(x.shape().to_vec(), out).expect("same shape")
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn flipping_twice_is_identity() {
        let x: Vec<f64> = (0..2 * 5 * 6).map(|v| v as f64).collect();
        let once = crop_flip(&x, 2, 5, 6, 0, 0, 0, true);
        assert_ne!(once, x);
        assert_eq!(crop_flip(&once, 2, 5, 6, 0, 0, 0, true), x);
    }

    #[test]
    fn centred_crop_is_identity_and_shift_moves_pixels() {
        let x: Vec<f64> = (0..16).map(|v| v as f64 + 1.0).collect();
        assert_eq!(crop_flip(&x, 1, 4, 4, 2, 2, 2, false), x);
        let shifted = crop_flip(&x, 1, 4, 4, 2, 3, 2, false);
        assert_eq!(&shifted[..12], &x[4..]);
        assert!(shifted[12..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_image_stays_constant_inside_the_crop() {
        let x = Tensor::full(&[3, 1, 8, 8], 2.5);
        let y = augment(&x, &AugmentConfig { pad: 0, flip: true }, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(y, x);
    }

    #[test]
    fn fixed_seed_reproduces() {
        let x: Tensor<f64> = Tensor::uniform(&[4, 3, 8, 8], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(0));
        let cfg = AugmentConfig::default();
        let a = augment(&x, &cfg, &mut ChaCha8Rng::seed_from_u64(9));
        let b = augment(&x, &cfg, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
        assert_ne!(a, augment(&x, &cfg, &mut ChaCha8Rng::seed_from_u64(10)));
    }
}
