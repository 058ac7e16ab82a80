//! Whole networks: a validated layer sequence with forward, backward and
//! parameter and FLOP audits.

mod build;
mod layer;

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

pub use build::{
    build_kaconvnet, build_kavgg11, build_stem, build_transition, conv, kaconv_block, linear, se_block, KaConvNetConfig,
    NetworkConfig, VggConfig, PRESETS, VGG11,
};
pub use layer::{Conv, Layer, LayerCache, Linear, Param, Se, SeCache};

use crate::error::{ensure, Error, Result};
use crate::ops::norm::Mode;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A built network. Topology is fixed; parameters change only through
/// [`Network::params_mut`].
#[derive(Clone, Debug, PartialEq)]
pub struct Network<T: Scalar = f64> {
    config: NetworkConfig,
    layers: Vec<Layer<T>>,
}

/// Per-layer caches of one forward pass.
#[derive(Clone, Debug)]
pub struct NetCache<T: Scalar> {
    layers: Vec<LayerCache<T>>,
}

fn at_layer<T: Scalar>(index: usize, layer: &Layer<T>) -> impl FnOnce(Error) -> Error + '_ {
    move |e| Error::Layer { index, name: layer.kind().to_string(), source: Box::new(e) }
}

impl Network<f64> {
    /// Builds the network described by `config` with weights drawn from `seed`.
    pub fn build(config: &NetworkConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = match config {
            NetworkConfig::KaConvNet(c) => build_kaconvnet(c, &mut rng)?,
            NetworkConfig::Vgg(c) => build_kavgg11(c, &mut rng)?,
        };
        Ok(Self { config: config.clone(), layers })
    }
}

impl<T: Scalar> Network<T> {
    /// Wraps a hand-assembled layer list, e.g. for small test networks.
    pub fn from_layers(config: NetworkConfig, layers: Vec<Layer<T>>) -> Self {
        Self { config, layers }
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, NetCache<T>)> {
        let mut h = x.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            let (y, c) = l.forward(&h, mode).map_err(at_layer(i, l))?;
            caches.push(c);
            h = y;
        }
        Ok((h, NetCache { layers: caches }))
    }

    /// Eval-mode logits without retaining caches.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut h = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            h = l.infer(&h).map_err(at_layer(i, l))?;
        }
        Ok(h)
    }

    /// Input gradient and parameter gradients in [`Self::params`] order.
    pub fn backward(&self, grad: &Tensor<T>, cache: &NetCache<T>) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        ensure!(
            cache.layers.len() == self.layers.len(),
            Contract,
            "cache holds {} layers, network has {}",
            cache.layers.len(),
            self.layers.len()
        );
        let mut g = grad.clone();
        let mut grads = Vec::with_capacity(self.layers.len());
        for (i, (l, c)) in self.layers.iter().zip(&cache.layers).enumerate().rev() {
            let (gx, gp) = l.backward(&g, c).map_err(at_layer(i, l))?;
            grads.push(gp);
            g = gx;
        }
        Ok((g, grads.into_iter().rev().flatten().collect()))
    }

    /// Folds the batch statistics of a train-mode pass into running estimates.
    pub fn update_running(&mut self, cache: &NetCache<T>) {
        for (l, c) in self.layers.iter_mut().zip(&cache.layers) {
            l.update_running(c);
        }
    }

    /// Learnable tensors named `{index}.{kind}.{field}`.
    pub fn params(&self) -> Vec<Param<'_, T>> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| l.params().into_iter().map(move |p| Param { name: format!("{i}.{}.{}", l.kind(), p.name), ..p }))
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    /// Running statistics, named like [`Self::params`].
    pub fn buffers(&self) -> Vec<(String, &Tensor<T>)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| l.buffers().into_iter().map(move |(n, t)| (format!("{i}.{}.{n}", l.kind()), t)))
            .collect()
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers.iter_mut().flat_map(|l| l.buffers_mut()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    /// Per-layer shapes, parameters and MACs for a `[C, H, W]` input.
    pub fn summary(&self, input: [usize; 3]) -> Result<Summary> {
        let mut shape = input.to_vec();
        let mut rows = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            let (out, macs) = l.shape_and_macs(&shape).map_err(at_layer(i, l))?;
            rows.push(LayerSummary { index: i, kind: l.kind(), out_shape: out.clone(), params: l.param_count(), macs });
            shape = out;
        }
        Ok(Summary { input, rows })
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network { config: self.config.clone(), layers: self.layers.iter().map(Layer::cast).collect() }
    }
}

/// Parameter count of a network.
pub fn count_params<T: Scalar>(net: &Network<T>) -> usize {
    net.param_count()
}

/// Multiply-accumulates of one forward pass on a `[C, H, W]` input.
pub fn count_flops<T: Scalar>(net: &Network<T>, input: [usize; 3]) -> Result<u64> {
    Ok(net.summary(input)?.macs())
}

#[derive(Clone, Debug, Serialize)]
pub struct LayerSummary {
    pub index: usize,
    pub kind: &'static str,
    pub out_shape: Vec<usize>,
    pub params: usize,
    pub macs: u64,
}

#[derive(Clone, Debug, Serialize)]
pub struct Summary {
    pub input: [usize; 3],
    pub rows: Vec<LayerSummary>,
}

impl Summary {
    pub fn params(&self) -> usize {
        self.rows.iter().map(|r| r.params).sum()
    }

    pub fn macs(&self) -> u64 {
        self.rows.iter().map(|r| r.macs).sum()
    }

    pub fn output_shape(&self) -> &[usize] {
        self.rows.last().map_or(&self.input[..], |r| &r.out_shape)
    }
}

impl fmt::Display for Summary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:>5}  {:<8} {:<18} {:>12} {:>16}", "layer", "kind", "output", "params", "MACs")?;
        for r in &self.rows {
            let shape = r.out_shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x");
            writeln!(f, "{:>5}  {:<8} {:<18} {:>12} {:>16}", r.index, r.kind, shape, r.params, r.macs)?;
        }
        let (p, m) = (self.params(), self.macs());
        writeln!(f, "total params {p} ({:.2}M), MACs {m} ({:.2}G)", p as f64 / 1e6, m as f64 / 1e9)
    }
}
