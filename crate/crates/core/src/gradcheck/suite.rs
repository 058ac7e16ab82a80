//! The full finite-difference suite behind `kaconv gradcheck`.
//!
//! Each op is exercised on `instances` random small problems. Inputs to
//! piecewise-linear maps are kept a little away from their kinks so that
//! central differences never straddle one.

use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_param, weighted_sum, GradOpts, GradReport};
use crate::activations::{Activation, ActivationKind, SplineGrid};
use crate::error::Result;
use crate::kaconv::{KaConv, KaConvConfig, OuterMode, ProductMode};
use crate::network::{
    build_stem, build_transition, conv, kaconv_block, linear, se_block, KaConvNetConfig, Layer, Network, NetworkConfig,
};
use crate::ops::conv::ConvSpec;
use crate::ops::elementwise::{mul_bwd, mul_fwd, scale_channels_bwd, scale_channels_fwd, sigmoid_bwd, sigmoid_fwd};
use crate::ops::norm::{BatchNorm, Mode};
use crate::tensor::Tensor;
use crate::training::loss::{cross_entropy_bwd, cross_entropy_fwd};

/// Tolerance for single layers and ops.
pub const LAYER_TOLERANCE: f64 = 1e-6;
/// Tolerance for the end-to-end toy network.
pub const NETWORK_TOLERANCE: f64 = 1e-5;
/// Tolerance for the loss, whose gradient is closed-form and cheap.
pub const LOSS_TOLERANCE: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteOptions {
    /// Random problems per op.
    pub instances: usize,
    pub seed: u64,
    /// Finite-difference coordinates sampled per tensor.
    pub max_coords: usize,
    /// Central-difference step.
    pub h: f64,
    /// Only run ops whose name contains this string.
    pub filter: Option<String>,
    /// Negates the analytic gradients of the named op, to prove the suite
    /// notices a broken backward.
    pub sign_flip: Option<String>,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self { instances: 20, seed: 0, max_coords: 16, h: 1e-5, filter: None, sign_flip: None }
    }
}

/// Worst error of one op over all instances, broken down per tensor.
#[derive(Clone, Debug, Serialize)]
pub struct OpReport {
    pub op: String,
    pub tolerance: f64,
    pub instances: usize,
    pub worst: f64,
    pub fields: BTreeMap<String, f64>,
    /// Whether the per-tensor breakdown is printed.
    pub detailed: bool,
}

impl OpReport {
    pub fn passed(&self) -> bool {
        self.worst <= self.tolerance
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub ops: Vec<OpReport>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.ops.iter().all(OpReport::passed)
    }

    pub fn worst(&self) -> f64 {
        self.ops.iter().map(|o| o.worst).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> Vec<&OpReport> {
        self.ops.iter().filter(|o| !o.passed()).collect()
    }

    pub fn get(&self, op: &str) -> Option<&OpReport> {
        self.ops.iter().find(|o| o.op == op)
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<26} {:>10} {:>8}  {:>4}  result", "op", "worst", "tol", "runs")?;
        for o in &self.ops {
            let verdict = if o.passed() { "ok" } else { "FAIL" };
            writeln!(f, "{:<26} {:>10.3e} {:>8.0e}  {:>4}  {verdict}", o.op, o.worst, o.tolerance, o.instances)?;
            if o.detailed {
                for (name, err) in &o.fields {
                    writeln!(f, "  {name:<24} {err:>10.3e}")?;
                }
            }
        }
        write!(f, "worst overall {:.3e}", self.worst())
    }
}

struct Ctx {
    rng: ChaCha8Rng,
    opts: GradOpts,
    flip: bool,
}

impl Ctx {
    fn check<M: Clone>(
        &self,
        name: impl Into<String>,
        model: &M,
        analytic: &Tensor<f64>,
        select: impl Fn(&mut M) -> &mut Tensor<f64>,
        loss: impl Fn(&M) -> f64,
    ) -> GradReport {
        let a = if self.flip { analytic.map(|v| -v) } else { analytic.clone() };
        check_param(name, model, &a, select, loss, &self.opts)
    }

    fn uniform(&mut self, shape: &[usize]) -> Tensor<f64> {
        Tensor::uniform(shape, -1.0, 1.0, &mut self.rng)
    }

    /// Entries in `±[gap, 1.5)`, away from a kink at zero.
    fn gapped(&mut self, shape: &[usize], gap: f64) -> Tensor<f64> {
        let r = &mut self.rng;
        Tensor::from_fn(shape, |_| {
            let v: f64 = r.gen_range(gap..1.5);
            if r.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
    }

    /// Moves every parameter off its initial value and sets running
    /// statistics to plausible nonzero values.
    fn jitter_layer(&mut self, layer: &mut Layer<f64>) {
        for t in layer.params_mut() {
            t.data_mut().iter_mut().for_each(|v| *v += self.rng.gen_range(-0.3..0.3));
        }
        for t in layer.buffers_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = self.rng.gen_range(0.5..2.0));
        }
    }

    fn jitter_net(&mut self, net: &mut Network<f64>) {
        for t in net.params_mut() {
            t.data_mut().iter_mut().for_each(|v| *v += self.rng.gen_range(-0.3..0.3));
        }
        for t in net.buffers_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = self.rng.gen_range(0.5..2.0));
        }
    }

    /// Checks a layer's input and parameter gradients under `Σ r ⊙ y`.
    fn layer(&mut self, mut layer: Layer<f64>, x: Tensor<f64>, mode: Mode) -> Result<Vec<GradReport>> {
        self.jitter_layer(&mut layer);
        let (y, cache) = layer.forward(&x, mode)?;
        let r = self.uniform(y.shape());
        let (gx, grads) = layer.backward(&r, &cache)?;
        let names: Vec<String> = layer.params().into_iter().map(|p| p.name).collect();
        let loss = |m: &(Layer<f64>, Tensor<f64>)| weighted_sum(&m.0.forward(&m.1, mode).expect("shapes are fixed").0, &r);
        let model = (layer, x);
        let mut out = vec![self.check("x", &model, &gx, |m| &mut m.1, loss)];
        for (i, (name, g)) in names.iter().zip(&grads).enumerate() {
            out.push(self.check(name.clone(), &model, g, move |m| m.0.params_mut().swap_remove(i), loss));
        }
        Ok(out)
    }

    fn network(&mut self, mut net: Network<f64>, x: Tensor<f64>) -> Result<Vec<GradReport>> {
        self.jitter_net(&mut net);
        let (y, cache) = net.forward(&x, Mode::Train)?;
        let r = self.uniform(y.shape());
        let (gx, grads) = net.backward(&r, &cache)?;
        let names: Vec<String> = net.params().into_iter().map(|p| p.name).collect();
        let loss =
            |m: &(Network<f64>, Tensor<f64>)| weighted_sum(&m.0.forward(&m.1, Mode::Train).expect("shapes are fixed").0, &r);
        let model = (net, x);
        let mut out = vec![self.check("x", &model, &gx, |m| &mut m.1, loss)];
        for (i, (name, g)) in names.iter().zip(&grads).enumerate() {
            out.push(self.check(name.clone(), &model, g, move |m| m.0.params_mut().swap_remove(i), loss));
        }
        Ok(out)
    }

    fn activation(&mut self, kind: ActivationKind, gap: f64) -> Result<Vec<GradReport>> {
        let mut act = kind.build::<f64>(3)?;
        for t in act.params_mut() {
            t.data_mut().iter_mut().for_each(|v| *v += self.rng.gen_range(-0.3..0.3));
        }
        let knots: Vec<f64> = match &act {
            Activation::GLinear(g) => g.grid().to_vec(),
            _ => vec![0.0],
        };
        let shape = [2, 3, 3, 4];
        let r = &mut self.rng;
        let x = Tensor::from_fn(&shape, |_| loop {
            let v: f64 = r.gen_range(-3.0..3.0);
            if knots.iter().all(|k| (v - k).abs() >= gap) {
                break v;
            }
        });
        let l = 12;
        let gy = self.uniform(&shape);
        let (gx, grads) = act.backward(x.data(), gy.data(), l)?;
        let gx = Tensor::from_parts(shape.to_vec(), gx);
        let names: Vec<&str> = act.params().iter().map(|p| p.name).collect();
        let loss = |m: &(Activation<f64>, Tensor<f64>)| {
            let mut y = m.1.data().to_vec();
            m.0.apply_inplace(&mut y, l).expect("shapes are fixed");
            y.iter().zip(gy.data()).map(|(a, b)| a * b).sum()
        };
        let model = (act, x);
        let mut out = vec![self.check("x", &model, &gx, |m| &mut m.1, loss)];
        for (i, (name, g)) in names.iter().zip(&grads).enumerate() {
            out.push(self.check(*name, &model, g, move |m| m.0.params_mut().swap_remove(i), loss));
        }
        Ok(out)
    }

    fn ka_layer(&mut self, cfg: KaConvConfig, mode: Mode) -> Result<Vec<GradReport>> {
        let layer = Layer::Ka(KaConv::new(cfg, &mut self.rng)?);
        let x = self.gapped(&[2, cfg.c_in, 5, 5], 0.01);
        self.layer(layer, x, mode)
    }
}

type OpFn = fn(&mut Ctx) -> Result<Vec<GradReport>>;

fn small_net_config() -> KaConvNetConfig {
    let mut cfg = KaConvNetConfig::new([1, 1, 1, 1], [8, 8, 8, 8], 3);
    cfg.in_channels = 2;
    cfg.se_reduction = 4;
    cfg.ffn_ratio = 2;
    cfg.head_hidden = 0;
    cfg
}

/// Two-block toy network: a KA layer, a KA block, a convolution block,
/// pooling and a linear classifier over 3 classes on 2-channel input.
pub fn toy_net(seed: u64) -> Network<f64> {
    let cfg = small_net_config();
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = vec![Layer::Ka(KaConv::new(cfg.ka_layer(2, 8, 1), &mut r).expect("valid layer"))];
    layers.push(kaconv_block(&cfg, 8, true, &mut r).expect("valid block"));
    layers.push(kaconv_block(&cfg, 8, false, &mut r).expect("valid block"));
    layers.extend([Layer::GlobalPool, Layer::Linear(linear(8, 3, &mut r))]);
    Network::from_layers(NetworkConfig::KaConvNet(cfg), layers)
}

fn ops() -> Vec<(&'static str, f64, bool, OpFn)> {
    let t = LAYER_TOLERANCE;
    vec![
        ("conv2d", t, false, |c| {
            let l = conv(3, 4, ConvSpec::new(3, 1, 1, 1), true, &mut c.rng);
            let x = c.uniform(&[2, 3, 5, 5]);
            c.layer(l, x, Mode::Train)
        }),
        ("conv2d.grouped", t, false, |c| {
            let l = conv(4, 6, ConvSpec::new(3, 2, 1, 2), false, &mut c.rng);
            let x = c.uniform(&[2, 4, 6, 5]);
            c.layer(l, x, Mode::Train)
        }),
        ("conv2d.depthwise", t, false, |c| {
            let l = conv(4, 4, ConvSpec::same(3, 2, 4), true, &mut c.rng);
            let x = c.uniform(&[2, 4, 5, 6]);
            c.layer(l, x, Mode::Train)
        }),
        ("batch_norm.train", t, false, |c| {
            let x = c.uniform(&[3, 3, 3, 4]);
            c.layer(Layer::Norm(BatchNorm::new(3)), x, Mode::Train)
        }),
        ("batch_norm.eval", t, false, |c| {
            let x = c.uniform(&[3, 3, 3, 4]);
            c.layer(Layer::Norm(BatchNorm::new(3)), x, Mode::Eval)
        }),
        ("linear", t, false, |c| {
            let l = Layer::Linear(linear(5, 4, &mut c.rng));
            let x = c.uniform(&[3, 5]);
            c.layer(l, x, Mode::Train)
        }),
        ("global_avg_pool", t, false, |c| {
            let x = c.uniform(&[2, 3, 4, 5]);
            c.layer(Layer::GlobalPool, x, Mode::Train)
        }),
        ("max_pool2", t, false, |c| {
            let x = c.uniform(&[2, 3, 4, 6]);
            c.layer(Layer::MaxPool, x, Mode::Train)
        }),
        ("relu", t, false, |c| {
            let x = c.gapped(&[2, 3, 4, 4], 0.01);
            c.layer(Layer::Relu, x, Mode::Train)
        }),
        ("silu", t, false, |c| {
            let x = c.uniform(&[2, 3, 4, 4]).map(|v| 3.0 * v);
            c.layer(Layer::Silu, x, Mode::Train)
        }),
        ("mul", t, false, |c| {
            let (a, b) = (c.uniform(&[2, 3, 4]), c.uniform(&[2, 3, 4]));
            let r = c.uniform(&[2, 3, 4]);
            let (ga, gb) = mul_bwd(&r, &a, &b)?;
            let loss = |m: &(Tensor<f64>, Tensor<f64>)| weighted_sum(&mul_fwd(&m.0, &m.1).unwrap(), &r);
            let m = (a, b);
            Ok(vec![c.check("a", &m, &ga, |m| &mut m.0, loss), c.check("b", &m, &gb, |m| &mut m.1, loss)])
        }),
        ("sigmoid", t, false, |c| {
            let x = c.uniform(&[2, 3, 4]).map(|v| 4.0 * v);
            let r = c.uniform(&[2, 3, 4]);
            let gx = sigmoid_bwd(&r, &sigmoid_fwd(&x))?;
            Ok(vec![c.check("x", &x, &gx, |t| t, |t| weighted_sum(&sigmoid_fwd(t), &r))])
        }),
        ("scale_channels", t, false, |c| {
            let (x, s) = (c.uniform(&[2, 3, 2, 3]), c.uniform(&[2, 3]));
            let r = c.uniform(&[2, 3, 2, 3]);
            let (gx, gs) = scale_channels_bwd(&r, &x, &s)?;
            let loss = |m: &(Tensor<f64>, Tensor<f64>)| weighted_sum(&scale_channels_fwd(&m.0, &m.1).unwrap(), &r);
            let m = (x, s);
            Ok(vec![c.check("x", &m, &gx, |m| &mut m.0, loss), c.check("s", &m, &gs, |m| &mut m.1, loss)])
        }),
        ("glinear", t, false, |c| c.activation(ActivationKind::GLinear { intervals: 2 }, 0.01)),
        ("glinear.6", t, false, |c| c.activation(ActivationKind::GLinear { intervals: 6 }, 0.01)),
        ("prelu", t, false, |c| c.activation(ActivationKind::PRelu, 0.01)),
        ("bspline", t, false, |c| c.activation(ActivationKind::BSpline { grid: SplineGrid::default() }, 0.0)),
        ("convkan", t, true, |c| {
            let mut layer = KaConv::new(KaConvConfig::new(2, 3, 3, 1), &mut c.rng)?;
            for p in layer.act.params_mut() {
                p.data_mut().iter_mut().for_each(|v| *v += c.rng.gen_range(-0.3..0.3));
            }
            let x = c.gapped(&[2, 2, 4, 5], 0.01);
            let product = layer.convkan(&x)?.product;
            let r = c.uniform(product.shape());
            let (gx, grads) = layer.convkan_backward(&x, &r)?;
            let names: Vec<&str> = layer.params().iter().map(|p| p.name).collect();
            let loss = |m: &(KaConv<f64>, Tensor<f64>)| weighted_sum(&m.0.convkan(&m.1).unwrap().product, &r);
            let m = (layer, x);
            let mut out = vec![c.check("x", &m, &gx, |m| &mut m.1, loss)];
            for (i, g) in grads.iter().enumerate() {
                out.push(c.check(names[i], &m, g, move |m| m.0.params_mut().swap_remove(i), loss));
            }
            Ok(out)
        }),
        ("kaconv.train", t, true, |c| c.ka_layer(KaConvConfig::new(2, 3, 3, 1), Mode::Train)),
        ("kaconv.eval", t, true, |c| c.ka_layer(KaConvConfig::new(2, 3, 3, 1), Mode::Eval)),
        ("kaconv.stride2", t, false, |c| c.ka_layer(KaConvConfig::new(2, 3, 3, 2), Mode::Train)),
        // With K = 1 each base and learn weight scales one whole channel, which
        // train-mode batch norm cancels; the gradient then lives only in the
        // norm's epsilon. Eval mode has no such invariance.
        ("kaconv.k1", t, false, |c| c.ka_layer(KaConvConfig::new(3, 2, 1, 1), Mode::Eval)),
        ("kaconv.per_channel", t, false, |c| {
            c.ka_layer(KaConvConfig::new(2, 3, 3, 1).with_outer(OuterMode::PerChannel), Mode::Train)
        }),
        ("kaconv.per_element", t, false, |c| {
            c.ka_layer(KaConvConfig::new(2, 3, 3, 1).with_product(ProductMode::PerElement), Mode::Train)
        }),
        ("kaconv.prelu", t, false, |c| {
            c.ka_layer(KaConvConfig::new(2, 3, 3, 1).with_activation(ActivationKind::PRelu), Mode::Train)
        }),
        ("kaconv.bspline", t, false, |c| {
            let kind = ActivationKind::BSpline { grid: SplineGrid::default() };
            c.ka_layer(KaConvConfig::new(2, 3, 3, 1).with_activation(kind), Mode::Train)
        }),
        ("se", t, false, |c| {
            let l = se_block(8, 4, &mut c.rng)?;
            let x = c.uniform(&[2, 8, 3, 3]);
            c.layer(l, x, Mode::Train)
        }),
        ("block.ka", t, false, |c| {
            let l = kaconv_block(&small_net_config(), 8, true, &mut c.rng)?;
            let x = c.gapped(&[2, 8, 4, 4], 0.01);
            c.layer(l, x, Mode::Train)
        }),
        ("block.conv", t, false, |c| {
            let l = kaconv_block(&small_net_config(), 8, false, &mut c.rng)?;
            let x = c.uniform(&[2, 8, 4, 4]);
            c.layer(l, x, Mode::Train)
        }),
        ("stem", t, false, |c| {
            let cfg = small_net_config();
            let net = Network::from_layers(NetworkConfig::KaConvNet(cfg.clone()), build_stem(&cfg, &mut c.rng)?);
            let x = c.gapped(&[2, 2, 8, 8], 0.01);
            c.network(net, x)
        }),
        ("stem.conv", t, false, |c| {
            let mut cfg = small_net_config();
            cfg.stage_ka_mask = [false; 4];
            let net = Network::from_layers(NetworkConfig::KaConvNet(cfg.clone()), build_stem(&cfg, &mut c.rng)?);
            let x = c.uniform(&[2, 2, 8, 8]);
            c.network(net, x)
        }),
        ("transition", t, false, |c| {
            let net = Network::from_layers(NetworkConfig::KaConvNet(small_net_config()), build_transition(4, 6, &mut c.rng));
            let x = c.uniform(&[2, 4, 5, 5]);
            c.network(net, x)
        }),
        ("toy_net", NETWORK_TOLERANCE, false, |c| {
            let net = toy_net(c.rng.gen());
            let x = c.uniform(&[2, 2, 5, 5]);
            c.network(net, x)
        }),
        ("cross_entropy", LOSS_TOLERANCE, false, |c| {
            let logits = c.uniform(&[4, 5]).map(|v| 3.0 * v);
            let labels: Vec<usize> = (0..4).map(|_| c.rng.gen_range(0..5)).collect();
            let g = cross_entropy_bwd(&logits, &labels)?;
            Ok(vec![c.check("logits", &logits, &g, |t| t, |t| cross_entropy_fwd(t, &labels).unwrap())])
        }),
    ]
}

/// Names of every op the suite covers, in run order.
pub fn op_names() -> Vec<&'static str> {
    ops().into_iter().map(|o| o.0).collect()
}

pub fn run_suite(opts: &SuiteOptions) -> Result<SuiteReport> {
    let mut reports = Vec::new();
    for (oi, (op, tolerance, detailed, run)) in ops().into_iter().enumerate() {
        if opts.filter.as_deref().is_some_and(|f| !op.contains(f)) {
            continue;
        }
        let mut fields: BTreeMap<String, f64> = BTreeMap::new();
        for inst in 0..opts.instances {
            let seed = opts.seed.wrapping_mul(1_000_003).wrapping_add((oi as u64) << 20 | inst as u64);
            let mut ctx = Ctx {
                rng: ChaCha8Rng::seed_from_u64(seed),
                opts: GradOpts { h: opts.h, max_coords: opts.max_coords, seed },
                flip: opts.sign_flip.as_deref() == Some(op),
            };
            for r in run(&mut ctx)? {
                let e = fields.entry(r.name).or_insert(0.0);
                *e = e.max(r.rel_err);
            }
        }
        let worst = fields.values().copied().fold(0.0, f64::max);
        reports.push(OpReport { op: op.to_string(), tolerance, instances: opts.instances, worst, fields, detailed });
    }
    Ok(SuiteReport { ops: reports })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick(filter: &str) -> SuiteOptions {
        SuiteOptions { instances: 2, filter: Some(filter.into()), ..SuiteOptions::default() }
    }

    #[test]
    fn op_names_are_unique() {
        let names = op_names();
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
    }

    #[test]
    fn a_sign_flip_is_caught() {
        let mut opts = quick("linear");
        assert!(run_suite(&opts).unwrap().passed());
        opts.sign_flip = Some("linear".into());
        let rep = run_suite(&opts).unwrap();
        assert!(!rep.passed());
        assert!(rep.get("linear").unwrap().worst > 1.0);
    }

    #[test]
    fn kaconv_report_lists_every_parameter() {
        let rep = run_suite(&quick("kaconv.train")).unwrap();
        let fields: Vec<&str> = rep.ops[0].fields.keys().map(String::as_str).collect();
        for f in ["x", "w_base", "w_learn", "act.alphas", "act.beta", "norm.gamma", "norm.beta", "w_outer", "w_mix", "b_mix"] {
            assert!(fields.contains(&f), "{f} missing from {fields:?}");
        }
    }
}
