//! Layer descriptors with their parameters, forward caches and gradients.

use crate::activations::{silu, silu_grad};
use crate::error::{ensure, Error, Result};
use crate::kaconv::{KaConv, KaConvCache};
use crate::ops::conv::{conv2d_backward, conv2d_forward, conv_macs, ConvSpec};
use crate::ops::elementwise::{relu_bwd, relu_fwd, scale_channels_bwd, scale_channels_fwd, sigmoid};
use crate::ops::linear::{linear_bwd, linear_fwd};
use crate::ops::norm::{BatchNorm, BnCache, Mode, BN_MOMENTUM};
use crate::ops::pool::{global_avg_pool_bwd, global_avg_pool_fwd, max_pool2_bwd, max_pool2_fwd, MaxPoolCache};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Plain (possibly grouped) convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv<T: Scalar> {
    pub w: Tensor<T>,
    pub b: Option<Tensor<T>>,
    pub spec: ConvSpec,
}

/// Fully connected layer on `[N, In]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T: Scalar> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

/// Squeeze-and-excitation channel gate.
#[derive(Clone, Debug, PartialEq)]
pub struct Se<T: Scalar> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer<T: Scalar> {
    Ka(KaConv<T>),
    Conv(Conv<T>),
    Norm(BatchNorm<T>),
    Silu,
    Relu,
    MaxPool,
    /// `[N, C, H, W] → [N, C]`.
    GlobalPool,
    Linear(Linear<T>),
    Se(Se<T>),
    /// `y = x + body(x)`.
    Residual(Vec<Layer<T>>),
}

/// Saved state of one layer's forward pass.
#[derive(Clone, Debug)]
pub enum LayerCache<T: Scalar> {
    Ka(Box<KaConvCache<T>>),
    Conv(Tensor<T>),
    Norm(BnCache<T>),
    Input(Tensor<T>),
    MaxPool(MaxPoolCache),
    GlobalPool(usize, usize),
    Se(Box<SeCache<T>>),
    Residual(Vec<LayerCache<T>>),
}

#[derive(Clone, Debug)]
pub struct SeCache<T: Scalar> {
    x: Tensor<T>,
    s: Tensor<T>,
    pre: Tensor<T>,
    hidden: Tensor<T>,
    gate: Tensor<T>,
}

/// A named learnable tensor and whether weight decay applies to it.
pub struct Param<'a, T: Scalar> {
    pub name: String,
    pub tensor: &'a Tensor<T>,
    pub decay: bool,
}

fn contract(layer: &str) -> Error {
    Error::Contract(format!("cache does not belong to a {layer} layer"))
}

impl<T: Scalar> Se<T> {
    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, SeCache<T>)> {
        let s = global_avg_pool_fwd(x)?;
        let pre = linear_fwd(&s, &self.fc1.w, Some(&self.fc1.b))?;
        let hidden = relu_fwd(&pre);
        let gate = linear_fwd(&hidden, &self.fc2.w, Some(&self.fc2.b))?.map(sigmoid);
        let y = scale_channels_fwd(x, &gate)?;
        Ok((y, SeCache { x: x.clone(), s, pre, hidden, gate }))
    }

    /// `(dx, [dw1, db1, dw2, db2])`.
    pub fn backward(&self, gy: &Tensor<T>, c: &SeCache<T>) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        let (mut gx, ggate) = scale_channels_bwd(gy, &c.x, &c.gate)?;
        let gz = ggate.zip_map(&c.gate, |g, s| g * s * (T::one() - s))?;
        let (gh, gw2, gb2) = linear_bwd(&gz, &c.hidden, &self.fc2.w)?;
        let gpre = relu_bwd(&gh, &c.pre)?;
        let (gs, gw1, gb1) = linear_bwd(&gpre, &c.s, &self.fc1.w)?;
        let (_, _, h, w) = c.x.dims4()?;
        gx.axpy(T::one(), &global_avg_pool_bwd(&gs, h, w)?)?;
        Ok((gx, vec![gw1, gb1, gw2, gb2]))
    }
}

impl<T: Scalar> Layer<T> {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Ka(_) => "ka",
            Layer::Conv(c) if c.spec.groups > 1 && c.spec.groups == c.w.shape()[0] => "dwconv",
            Layer::Conv(_) => "conv",
            Layer::Norm(_) => "bn",
            Layer::Silu => "silu",
            Layer::Relu => "relu",
            Layer::MaxPool => "maxpool",
            Layer::GlobalPool => "gap",
            Layer::Linear(_) => "linear",
            Layer::Se(_) => "se",
            Layer::Residual(_) => "block",
        }
    }

    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, LayerCache<T>)> {
        Ok(match self {
            Layer::Ka(k) => {
                let (y, c) = k.forward(x, mode)?;
                (y, LayerCache::Ka(Box::new(c)))
            }
            Layer::Conv(c) => (conv2d_forward(x, &c.w, c.b.as_ref(), &c.spec)?, LayerCache::Conv(x.clone())),
            Layer::Norm(bn) => {
                let (y, c) = bn.forward(x, mode)?;
                (y, LayerCache::Norm(c))
            }
            Layer::Silu => (x.map(silu), LayerCache::Input(x.clone())),
            Layer::Relu => (relu_fwd(x), LayerCache::Input(x.clone())),
            Layer::MaxPool => {
                let (y, c) = max_pool2_fwd(x)?;
                (y, LayerCache::MaxPool(c))
            }
            Layer::GlobalPool => {
                let (_, _, h, w) = x.dims4()?;
                (global_avg_pool_fwd(x)?, LayerCache::GlobalPool(h, w))
            }
            Layer::Linear(l) => (linear_fwd(x, &l.w, Some(&l.b))?, LayerCache::Input(x.clone())),
            Layer::Se(se) => {
                let (y, c) = se.forward(x)?;
                (y, LayerCache::Se(Box::new(c)))
            }
            Layer::Residual(body) => {
                let mut h = x.clone();
                let mut caches = Vec::with_capacity(body.len());
                for l in body {
                    let (y, c) = l.forward(&h, mode)?;
                    caches.push(c);
                    h = y;
                }
                ensure!(h.shape() == x.shape(), Config, "residual body maps {:?} to {:?}", x.shape(), h.shape());
                h.axpy(T::one(), x)?;
                (h, LayerCache::Residual(caches))
            }
        })
    }

    /// Eval-mode forward that keeps no caches.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Layer::Ka(k) => k.infer(x),
            Layer::Residual(body) => {
                let mut h = x.clone();
                for l in body {
                    h = l.infer(&h)?;
                }
                h.axpy(T::one(), x)?;
                Ok(h)
            }
            Layer::Norm(bn) => {
                let (n, c, l) = match *x.shape() {
                    [n, c] => (n, c, 1),
                    [n, c, h, w] => (n, c, h * w),
                    _ => return Err(Error::Dimension(format!("batch norm needs rank 2 or 4, got {:?}", x.shape()))),
                };
                let mut y = x.clone();
                bn.infer_inplace(y.data_mut(), n, c, l)?;
                Ok(y)
            }
            other => Ok(other.forward(x, Mode::Eval)?.0),
        }
    }

    /// Input gradient and parameter gradients in [`Self::params`] order.
    pub fn backward(&self, gy: &Tensor<T>, cache: &LayerCache<T>) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        Ok(match (self, cache) {
            (Layer::Ka(k), LayerCache::Ka(c)) => k.backward(gy, c)?.into_vec(),
            (Layer::Conv(conv), LayerCache::Conv(x)) => {
                let g = conv2d_backward(x, &conv.w, conv.b.is_some(), &conv.spec, gy)?;
                let mut v = vec![g.w];
                v.extend(g.b);
                (g.x, v)
            }
            (Layer::Norm(_), LayerCache::Norm(c)) => {
                let (gx, gg, gb) = c.backward(gy)?;
                (gx, vec![gg, gb])
            }
            (Layer::Silu, LayerCache::Input(x)) => (gy.zip_map(x, |g, v| g * silu_grad(v))?, vec![]),
            (Layer::Relu, LayerCache::Input(x)) => (relu_bwd(gy, x)?, vec![]),
            (Layer::MaxPool, LayerCache::MaxPool(c)) => (max_pool2_bwd(gy, c)?, vec![]),
            (Layer::GlobalPool, LayerCache::GlobalPool(h, w)) => (global_avg_pool_bwd(gy, *h, *w)?, vec![]),
            (Layer::Linear(l), LayerCache::Input(x)) => {
                let (gx, gw, gb) = linear_bwd(gy, x, &l.w)?;
                (gx, vec![gw, gb])
            }
            (Layer::Se(se), LayerCache::Se(c)) => se.backward(gy, c)?,
            (Layer::Residual(body), LayerCache::Residual(caches)) => {
                ensure!(body.len() == caches.len(), Contract, "residual cache has {} entries for {} layers", caches.len(), body.len());
                let mut g = gy.clone();
                let mut grads: Vec<Vec<Tensor<T>>> = Vec::with_capacity(body.len());
                for (l, c) in body.iter().zip(caches).rev() {
                    let (gx, gp) = l.backward(&g, c)?;
                    grads.push(gp);
                    g = gx;
                }
                g.axpy(T::one(), gy)?;
                (g, grads.into_iter().rev().flatten().collect())
            }
            (layer, _) => return Err(contract(layer.kind())),
        })
    }

    /// Folds train-mode batch statistics into running estimates.
    pub fn update_running(&mut self, cache: &LayerCache<T>) {
        match (self, cache) {
            (Layer::Ka(k), LayerCache::Ka(c)) => k.update_running(c, BN_MOMENTUM),
            (Layer::Norm(bn), LayerCache::Norm(c)) => bn.update_running(c, BN_MOMENTUM),
            (Layer::Residual(body), LayerCache::Residual(caches)) => {
                for (l, c) in body.iter_mut().zip(caches) {
                    l.update_running(c);
                }
            }
            _ => {}
        }
    }

    /// Learnable tensors with names relative to this layer.
    pub fn params(&self) -> Vec<Param<'_, T>> {
        let p = |name: &str, tensor, decay| Param { name: name.to_string(), tensor, decay };
        match self {
            Layer::Ka(k) => k.params().into_iter().map(|r| p(r.name, r.tensor, r.decay)).collect(),
            Layer::Conv(c) => {
                let mut v = vec![p("w", &c.w, true)];
                if let Some(b) = &c.b {
                    v.push(p("b", b, false));
                }
                v
            }
            Layer::Norm(bn) => vec![p("gamma", &bn.gamma, false), p("beta", &bn.beta, false)],
            Layer::Linear(l) => vec![p("w", &l.w, true), p("b", &l.b, false)],
            Layer::Se(se) => vec![
                p("fc1.w", &se.fc1.w, true),
                p("fc1.b", &se.fc1.b, false),
                p("fc2.w", &se.fc2.w, true),
                p("fc2.b", &se.fc2.b, false),
            ],
            Layer::Residual(body) => body
                .iter()
                .enumerate()
                .flat_map(|(i, l)| {
                    l.params().into_iter().map(move |q| Param { name: format!("{i}.{}.{}", l.kind(), q.name), ..q })
                })
                .collect(),
            Layer::Silu | Layer::Relu | Layer::MaxPool | Layer::GlobalPool => vec![],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        match self {
            Layer::Ka(k) => k.params_mut(),
            Layer::Conv(c) => {
                let mut v = vec![&mut c.w];
                if let Some(b) = &mut c.b {
                    v.push(b);
                }
                v
            }
            Layer::Norm(bn) => vec![&mut bn.gamma, &mut bn.beta],
            Layer::Linear(l) => vec![&mut l.w, &mut l.b],
            Layer::Se(se) => vec![&mut se.fc1.w, &mut se.fc1.b, &mut se.fc2.w, &mut se.fc2.b],
            Layer::Residual(body) => body.iter_mut().flat_map(|l| l.params_mut()).collect(),
            Layer::Silu | Layer::Relu | Layer::MaxPool | Layer::GlobalPool => vec![],
        }
    }

    /// Non-learnable state (running statistics), named relative to this layer.
    pub fn buffers(&self) -> Vec<(String, &Tensor<T>)> {
        match self {
            Layer::Ka(k) => vec![
                ("norm.running_mean".into(), &k.norm.running_mean),
                ("norm.running_var".into(), &k.norm.running_var),
            ],
            Layer::Norm(bn) => vec![("running_mean".into(), &bn.running_mean), ("running_var".into(), &bn.running_var)],
            Layer::Residual(body) => body
                .iter()
                .enumerate()
                .flat_map(|(i, l)| l.buffers().into_iter().map(move |(n, t)| (format!("{i}.{}.{n}", l.kind()), t)))
                .collect(),
            _ => vec![],
        }
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Tensor<T>> {
        match self {
            Layer::Ka(k) => vec![&mut k.norm.running_mean, &mut k.norm.running_var],
            Layer::Norm(bn) => vec![&mut bn.running_mean, &mut bn.running_var],
            Layer::Residual(body) => body.iter_mut().flat_map(|l| l.buffers_mut()).collect(),
            _ => vec![],
        }
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.tensor.len()).sum()
    }

    /// Output shape for a `[C, H, W]` (or `[F]`) per-sample input, with MACs.
    pub fn shape_and_macs(&self, input: &[usize]) -> Result<(Vec<usize>, u64)> {
        let chw = |s: &[usize]| -> Result<(usize, usize, usize)> {
            match *s {
                [c, h, w] => Ok((c, h, w)),
                _ => Err(Error::Dimension(format!("{} layer needs a [C, H, W] input, got {s:?}", self.kind()))),
            }
        };
        Ok(match self {
            Layer::Ka(k) => {
                let (c, h, w) = chw(input)?;
                ensure!(c == k.config().c_in, Dimension, "KA layer expects {} channels, got {c}", k.config().c_in);
                let (ho, wo) = k.out_hw(h, w)?;
                (vec![k.config().c_out, ho, wo], k.flops(h, w)?.macs())
            }
            Layer::Conv(cv) => {
                let (c, h, w) = chw(input)?;
                let (co, cg, _, _) = cv.w.dims4()?;
                ensure!(c == cg * cv.spec.groups, Dimension, "conv expects {} channels, got {c}", cg * cv.spec.groups);
                let (ho, wo) = cv.spec.out_hw(h, w)?;
                (vec![co, ho, wo], conv_macs(c, co, &cv.spec, ho, wo))
            }
            Layer::Norm(bn) => {
                ensure!(input.first() == Some(&bn.channels()), Dimension, "batch norm over {} channels got {input:?}", bn.channels());
                (input.to_vec(), 0)
            }
            Layer::Silu | Layer::Relu => (input.to_vec(), 0),
            Layer::MaxPool => {
                let (c, h, w) = chw(input)?;
                ensure!(h >= 2 && w >= 2, Dimension, "max pool needs at least 2×2 input, got {h}×{w}");
                (vec![c, h / 2, w / 2], 0)
            }
            Layer::GlobalPool => (vec![chw(input)?.0], 0),
            Layer::Linear(l) => {
                let (o, i) = l.w.dims2()?;
                ensure!(input == [i], Dimension, "linear expects [{i}] features, got {input:?}");
                (vec![o], (i * o) as u64)
            }
            Layer::Se(se) => {
                let (c, _, _) = chw(input)?;
                let (r, ci) = se.fc1.w.dims2()?;
                ensure!(c == ci, Dimension, "SE expects {ci} channels, got {c}");
                (input.to_vec(), (2 * c * r) as u64)
            }
            Layer::Residual(body) => {
                let mut s = input.to_vec();
                let mut macs = 0;
                for l in body {
                    let (o, m) = l.shape_and_macs(&s)?;
                    s = o;
                    macs += m;
                }
                ensure!(s == input, Dimension, "residual body maps {input:?} to {s:?}");
                (s, macs)
            }
        })
    }

    pub fn cast<U: Scalar>(&self) -> Layer<U> {
        let lin = |l: &Linear<T>| Linear { w: l.w.cast(), b: l.b.cast() };
        let bn = |b: &BatchNorm<T>| BatchNorm {
            gamma: b.gamma.cast(),
            beta: b.beta.cast(),
            running_mean: b.running_mean.cast(),
            running_var: b.running_var.cast(),
        };
        match self {
            Layer::Ka(k) => Layer::Ka(k.cast()),
            Layer::Conv(c) => Layer::Conv(Conv { w: c.w.cast(), b: c.b.as_ref().map(|b| b.cast()), spec: c.spec }),
            Layer::Norm(b) => Layer::Norm(bn(b)),
            Layer::Silu => Layer::Silu,
            Layer::Relu => Layer::Relu,
            Layer::MaxPool => Layer::MaxPool,
            Layer::GlobalPool => Layer::GlobalPool,
            Layer::Linear(l) => Layer::Linear(lin(l)),
            Layer::Se(se) => Layer::Se(Se { fc1: lin(&se.fc1), fc2: lin(&se.fc2) }),
            Layer::Residual(body) => Layer::Residual(body.iter().map(|l| l.cast()).collect()),
        }
    }
}
