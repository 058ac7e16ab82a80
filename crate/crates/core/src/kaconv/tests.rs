use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::activations::SplineGrid;
use crate::gradcheck::{check_param, weighted_sum, GradOpts};
use crate::ops::conv::{conv2d_grouped_bwd, conv2d_grouped_fwd};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random input whose entries stay at least `gap` away from zero (the default knot).
fn input(shape: &[usize], gap: f64, r: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let v: f64 = r.gen_range(gap..1.5);
        if r.gen_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

/// Layer with its norm statistics and activation perturbed away from the defaults.
fn perturbed(cfg: KaConvConfig, r: &mut ChaCha8Rng) -> KaConv<f64> {
    let mut layer = KaConv::new(cfg, r).unwrap();
    for t in layer.act.params_mut() {
        for v in t.data_mut() {
            *v += r.gen_range(-0.3..0.3);
        }
    }
    for v in layer.norm.gamma.data_mut() {
        *v = r.gen_range(0.5..1.5);
    }
    for v in layer.norm.beta.data_mut() {
        *v = r.gen_range(-0.2..0.2);
    }
    for v in layer.norm.running_mean.data_mut() {
        *v = r.gen_range(-0.1..0.1);
    }
    for v in layer.norm.running_var.data_mut() {
        *v = r.gen_range(0.5..2.0);
    }
    layer
}

#[test]
fn shape_law() {
    let layer = KaConv::<f64>::new(KaConvConfig::new(8, 32, 3, 1), &mut rng(0)).unwrap();
    let x = Tensor::uniform(&[2, 8, 16, 16], -1.0, 1.0, &mut rng(1));
    assert_eq!(layer.convkan(&x).unwrap().product.shape(), &[2, 152, 16, 16]);
    assert_eq!(layer.forward(&x, Mode::Train).unwrap().0.shape(), &[2, 32, 16, 16]);
    let strided = KaConv::<f64>::new(KaConvConfig::new(8, 4, 3, 2), &mut rng(0)).unwrap();
    assert_eq!(strided.forward(&x, Mode::Train).unwrap().0.shape(), &[2, 4, 8, 8]);
}

#[test]
fn channel_mismatch_is_a_dimension_error() {
    let layer = KaConv::<f64>::new(KaConvConfig::new(3, 4, 3, 1), &mut rng(0)).unwrap();
    let x = Tensor::zeros(&[1, 2, 5, 5]);
    assert!(matches!(layer.forward(&x, Mode::Train), Err(crate::Error::Dimension(_))));
}

#[test]
fn fast_path_matches_oracle() {
    let mut r = rng(7);
    let mut count = 0;
    for &c_in in &[1, 2, 4] {
        for &k in &[1, 3, 5] {
            for &stride in &[1, 2] {
                for (outer, product) in [
                    (OuterMode::Dense, ProductMode::AfterAggregation),
                    (OuterMode::PerChannel, ProductMode::AfterAggregation),
                    (OuterMode::Dense, ProductMode::PerElement),
                ] {
                    let cfg = KaConvConfig::new(c_in, 3, k, stride).with_outer(outer).with_product(product);
                    let layer = perturbed(cfg, &mut r);
                    let x = Tensor::uniform(&[2, c_in, 6, 5], -2.0, 2.0, &mut r);
                    for mode in [Mode::Train, Mode::Eval] {
                        let fast = layer.forward(&x, mode).unwrap().0;
                        let slow = kaconv_reference_oracle(&layer, &x, mode).unwrap();
                        let err = fast.max_abs_diff(&slow);
                        assert!(err <= 1e-10, "C={c_in} K={k} s={stride} {outer:?} {product:?} {mode:?}: {err}");
                        count += 1;
                    }
                }
            }
        }
    }
    assert!(count >= 50);
}

#[test]
fn other_activation_families_match_oracle() {
    let mut r = rng(8);
    for kind in [ActivationKind::PRelu, ActivationKind::BSpline { grid: SplineGrid::default() }, ActivationKind::GLinear { intervals: 6 }] {
        let layer = perturbed(KaConvConfig::new(2, 3, 3, 1).with_activation(kind), &mut r);
        let x = Tensor::uniform(&[1, 2, 5, 5], -5.0, 5.0, &mut r);
        let fast = layer.forward(&x, Mode::Train).unwrap().0;
        let slow = kaconv_reference_oracle(&layer, &x, Mode::Train).unwrap();
        assert!(fast.max_abs_diff(&slow) <= 1e-10, "{kind:?}");
    }
}

#[test]
fn streaming_inference_matches_eval_forward() {
    let mut r = rng(9);
    for (outer, product) in [(OuterMode::Dense, ProductMode::AfterAggregation), (OuterMode::PerChannel, ProductMode::PerElement)] {
        let layer = perturbed(KaConvConfig::new(3, 5, 3, 1).with_outer(outer).with_product(product), &mut r);
        // 40×30 gives 1200 locations, so more than one tile per sample.
        let x = Tensor::uniform(&[2, 3, 40, 30], -2.0, 2.0, &mut r);
        let a = layer.forward(&x, Mode::Eval).unwrap().0;
        let b = layer.infer(&x).unwrap();
        assert!(a.max_abs_diff(&b) <= 1e-10);
    }
}

#[test]
fn zero_input_gives_bias_only() {
    let layer = KaConv::<f64>::new(KaConvConfig::new(2, 3, 3, 1), &mut rng(2)).unwrap();
    let x = Tensor::zeros(&[1, 2, 4, 4]);
    let y = layer.forward(&x, Mode::Train).unwrap().0;
    let oracle = kaconv_reference_oracle(&layer, &x, Mode::Train).unwrap();
    for (i, &v) in y.data().iter().enumerate() {
        assert_eq!(v, layer.b_mix.data()[i / 16]);
        assert_eq!(oracle.data()[i], v);
    }
}

#[test]
fn single_patch_by_hand() {
    // One channel, 3×3 input, no padding: one output location.
    let mut cfg = KaConvConfig::new(1, 1, 3, 1);
    cfg.padding = Some(0);
    let mut layer = KaConv::<f64>::new(cfg, &mut rng(3)).unwrap();
    let x = Tensor::from_fn(&[1, 1, 3, 3], |i| i as f64 * 0.1 - 0.35);
    let (_, cache) = layer.forward(&x, Mode::Eval).unwrap();
    let parts = layer.convkan(&x).unwrap();
    assert_eq!(parts.product.shape(), &[1, 19, 1, 1]);
    for qi in 0..19 {
        let mut a = 0.0;
        let mut b = 0.0;
        for k in 0..9 {
            let v = x.data()[k];
            a += layer.w_base.data()[qi * 9 + k] * silu(v);
            b += layer.w_learn.data()[qi * 9 + k] * v; // identity-initialized GLinear
        }
        assert!((parts.product.data()[qi] - a * b).abs() < 1e-14);
    }
    drop(cache);
    layer.w_outer.fill(0.0);
    let y = layer.forward(&x, Mode::Eval).unwrap().0;
    assert_eq!(y.data(), layer.b_mix.data());
}

#[test]
fn product_wiring() {
    let layer = perturbed(KaConvConfig::new(2, 2, 3, 1), &mut rng(4));
    let x = Tensor::uniform(&[1, 2, 5, 5], -1.0, 1.0, &mut rng(5));
    let parts = layer.convkan(&x).unwrap();
    let (a, b) = (parts.base.unwrap(), parts.learn.unwrap());
    // Where the basis branch is replaced by ones, the product is the learnable branch.
    let ones = Tensor::ones(a.shape());
    assert_eq!(crate::ops::mul_fwd(&ones, &b).unwrap(), b);
    assert_eq!(crate::ops::mul_fwd(&a, &b).unwrap(), parts.product);
}

#[test]
fn zero_output_gradient_gives_zero_gradients() {
    let layer = perturbed(KaConvConfig::new(2, 3, 3, 1), &mut rng(6));
    let x = input(&[1, 2, 5, 5], 0.01, &mut rng(7));
    let (y, cache) = layer.forward(&x, Mode::Train).unwrap();
    let (gx, grads) = layer.backward(&Tensor::zeros(y.shape()), &cache).unwrap().into_vec();
    assert!(gx.data().iter().all(|&v| v == 0.0));
    assert!(grads.iter().all(|g| g.data().iter().all(|&v| v == 0.0)));
}

#[test]
fn stale_gradient_is_a_contract_error() {
    let layer = KaConv::<f64>::new(KaConvConfig::new(2, 3, 3, 1), &mut rng(0)).unwrap();
    let (_, cache) = layer.forward(&Tensor::ones(&[1, 2, 5, 5]), Mode::Train).unwrap();
    assert!(matches!(layer.backward(&Tensor::zeros(&[1, 3, 4, 4]), &cache), Err(crate::Error::Contract(_))));
}

fn gradcheck_layer(cfg: KaConvConfig, mode: Mode, seed: u64) {
    let mut r = rng(seed);
    let layer = perturbed(cfg, &mut r);
    let x = input(&[1, cfg.c_in, 5, 5], 0.01, &mut r);
    let (y, cache) = layer.forward(&x, mode).unwrap();
    let weights = Tensor::uniform(y.shape(), -1.0, 1.0, &mut r);
    let (gx, grads) = layer.backward(&weights, &cache).unwrap().into_vec();
    let loss = |m: &(KaConv<f64>, Tensor<f64>)| weighted_sum(&m.0.forward(&m.1, mode).unwrap().0, &weights);
    let model = (layer.clone(), x);
    let opts = GradOpts { max_coords: 40, ..GradOpts::default() };
    let names: Vec<&str> = layer.params().iter().map(|p| p.name).collect();
    assert_eq!(names.len(), grads.len());
    let mut report = vec![check_param("x", &model, &gx, |m| &mut m.1, loss, &opts)];
    for (i, g) in grads.iter().enumerate() {
        report.push(check_param(names[i], &model, g, move |m| m.0.params_mut().into_iter().nth(i).unwrap(), loss, &opts));
    }
    for rep in &report {
        assert!(rep.rel_err <= 1e-6, "{cfg:?} {mode:?}: {rep}");
    }
}

#[test]
fn gradients_match_finite_differences() {
    gradcheck_layer(KaConvConfig::new(2, 3, 3, 1), Mode::Train, 10);
    gradcheck_layer(KaConvConfig::new(2, 3, 3, 2).with_outer(OuterMode::PerChannel), Mode::Train, 11);
    gradcheck_layer(KaConvConfig::new(2, 2, 3, 1).with_product(ProductMode::PerElement), Mode::Train, 12);
    gradcheck_layer(KaConvConfig::new(2, 3, 3, 1), Mode::Eval, 13);
    gradcheck_layer(KaConvConfig::new(2, 3, 3, 1).with_activation(ActivationKind::PRelu), Mode::Train, 14);
}

#[test]
fn outer_gradient_isolates_to_a_pointwise_conv() {
    for outer in [OuterMode::Dense, OuterMode::PerChannel] {
        let mut r = rng(15);
        let layer = perturbed(KaConvConfig::new(2, 3, 3, 1).with_outer(outer), &mut r);
        let x = input(&[2, 2, 4, 4], 0.01, &mut r);
        let (y, cache) = layer.forward(&x, Mode::Train).unwrap();
        let gy = Tensor::uniform(y.shape(), -1.0, 1.0, &mut r);
        let grads = layer.backward(&gy, &cache).unwrap();
        let groups = if outer == OuterMode::Dense { 1 } else { 2 };
        let s = ConvSpec::new(1, 1, 0, groups);
        let (o, c_outer) = conv2d_grouped_fwd(&cache.post_activation(), &layer.w_outer, None, &s).unwrap();
        let (y2, c_mix) = conv2d_grouped_fwd(&o, &layer.w_mix, Some(&layer.b_mix), &ConvSpec::new(1, 1, 0, 1)).unwrap();
        assert!(y.max_abs_diff(&y2) < 1e-12);
        let g_mix = conv2d_grouped_bwd(&gy, &c_mix).unwrap();
        let g_outer = conv2d_grouped_bwd(&g_mix.x, &c_outer).unwrap();
        assert!(grads.w_outer.max_abs_diff(&g_outer.w) < 1e-12);
        assert!(grads.w_mix.max_abs_diff(&g_mix.w) < 1e-12);
    }
}

#[test]
fn parameter_count_formula() {
    for (k, q) in [(1, 3), (3, 19), (5, 51)] {
        let (c, co) = (4, 6);
        let cfg = KaConvConfig::new(c, co, k, 1).with_outer(OuterMode::PerChannel);
        assert_eq!(cfg.q(), q);
        let layer = KaConv::<f64>::new(cfg, &mut rng(0)).unwrap();
        // Single-knot GLinear: two slopes and an intercept per channel.
        let want = 2 * c * q * k * k + 3 * c + 2 * c * q + c * q + c * co + co;
        assert_eq!(layer.param_count(), want);
        assert_eq!(cfg.param_count(), want);
        let dense = KaConvConfig::new(c, co, k, 1);
        assert_eq!(KaConv::<f64>::new(dense, &mut rng(0)).unwrap().param_count(), want - c * q + c * c * q);
    }
}

#[test]
fn flop_formula() {
    let cfg = KaConvConfig::new(128, 128, 3, 1);
    let f = KaConvFlops::new(&cfg, 14, 14);
    assert_eq!(f.inner_base, 4_290_048);
    assert_eq!(f.inner_learn, 4_290_048);
    assert_eq!(f.mix, 3_211_264);
    assert_eq!(f.headline(), 4_290_048 + 3_211_264);
    let standard = crate::ops::conv::conv_macs(128, 128, &ConvSpec::same(3, 1, 1), 14, 14);
    assert_eq!(standard, 28_901_376);
    assert!(f.headline() < standard);
    let per_channel = KaConvFlops::new(&cfg.with_outer(OuterMode::PerChannel), 14, 14);
    assert!(per_channel.macs() < standard);
    assert_eq!(per_channel.outer, 14 * 14 * 128 * 19);

    let k1 = KaConvFlops::new(&KaConvConfig::new(8, 8, 1, 1), 5, 5);
    assert_eq!(k1.inner_base, 5 * 5 * 8 * 3);
}
