//! Forward-latency benchmark of single layers at one tensor shape.
//!
//! Every method sees the same input and the same output width, so the
//! numbers compare the KA layer under each activation family against a plain
//! convolution. Latencies are summarized by order statistics only.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::activations::{ActivationKind, SplineGrid};
use crate::error::{ensure, Result};
use crate::kaconv::{KaConv, KaConvConfig};
use crate::network::{conv, Layer};
use crate::ops::conv::{conv2d_forward, ConvSpec};
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

pub const RESULTS_FILE: &str = "bench.csv";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BenchMethod {
    /// KA layer with GLinear activations.
    GLinear,
    /// KA layer with cubic B-spline activations.
    BSpline,
    /// Standard convolution with the same channels, kernel and stride.
    Conv,
}

impl BenchMethod {
    pub fn label(self) -> &'static str {
        match self {
            BenchMethod::GLinear => "kaconv-glinear",
            BenchMethod::BSpline => "kaconv-bspline",
            BenchMethod::Conv => "conv",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub glinear_intervals: usize,
    pub spline: SplineGrid,
    pub warmup: usize,
    pub iterations: usize,
    pub methods: Vec<BenchMethod>,
    pub precision: DType,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            batch: 32,
            channels: 256,
            height: 64,
            width: 64,
            kernel: 3,
            stride: 1,
            glinear_intervals: 2,
            spline: SplineGrid::default(),
            warmup: 5,
            iterations: 30,
            methods: vec![BenchMethod::GLinear, BenchMethod::BSpline, BenchMethod::Conv],
            precision: DType::F32,
            seed: 0,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.iterations >= 1, Config, "bench needs at least one timed iteration");
        ensure!(!self.methods.is_empty(), Config, "bench needs at least one method");
        ensure!(
            self.batch >= 1 && self.channels >= 1 && self.height >= 1 && self.width >= 1,
            Config,
            "bench shape must be non-empty"
        );
        self.ka_config(BenchMethod::GLinear).validate()?;
        self.ka_config(BenchMethod::BSpline).validate()?;
        Ok(())
    }

    fn ka_config(&self, method: BenchMethod) -> KaConvConfig {
        let act = match method {
            BenchMethod::BSpline => ActivationKind::BSpline { grid: self.spline },
            _ => ActivationKind::GLinear { intervals: self.glinear_intervals },
        };
        KaConvConfig::new(self.channels, self.channels, self.kernel, self.stride).with_activation(act)
    }

    /// The layer a method times, initialized from the config seed.
    pub fn layer(&self, method: BenchMethod) -> Result<Layer<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        Ok(match method {
            BenchMethod::Conv => {
                let spec = ConvSpec::same(self.kernel, self.stride, 1);
                conv(self.channels, self.channels, spec, true, &mut rng)
            }
            ka => Layer::Ka(KaConv::new(self.ka_config(ka), &mut rng)?),
        })
    }

    pub fn input<T: Scalar>(&self) -> Tensor<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5eed);
        Tensor::<f64>::uniform(&[self.batch, self.channels, self.height, self.width], -2.0, 2.0, &mut rng).cast()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub method: String,
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub precision: DType,
    pub threads: usize,
    pub iterations: usize,
    pub median_ms: f64,
    pub p95_ms: f64,
    pub min_ms: f64,
    /// Multiply-accumulates of one sample's forward pass.
    pub flops: u64,
    pub params: usize,
}

/// Nearest-rank percentile of an ascending slice.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Milliseconds of each timed forward pass after the warmups.
pub fn time_forward<T: Scalar>(layer: &Layer<T>, x: &Tensor<T>, warmup: usize, iterations: usize) -> Result<Vec<f64>> {
    let run = || -> Result<Tensor<T>> {
        match layer {
            // Straight to the kernel; the generic path would also copy the input into a cache.
            Layer::Conv(c) => conv2d_forward(x, &c.w, c.b.as_ref(), &c.spec),
            other => other.infer(x),
        }
    };
    for _ in 0..warmup {
        std::hint::black_box(run()?);
    }
    let mut times = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let t = Instant::now();
        std::hint::black_box(run()?);
        times.push(t.elapsed().as_secs_f64() * 1e3);
    }
    Ok(times)
}

fn bench_method<T: Scalar>(cfg: &BenchConfig, method: BenchMethod) -> Result<BenchRow> {
    let layer = cfg.layer(method)?;
    let (_, flops) = layer.shape_and_macs(&[cfg.channels, cfg.height, cfg.width])?;
    let params = layer.param_count();
    let layer = layer.cast::<T>();
    let x = cfg.input::<T>();
    let mut t = time_forward(&layer, &x, cfg.warmup, cfg.iterations)?;
    t.sort_by(f64::total_cmp);
    Ok(BenchRow {
        method: method.label().into(),
        batch: cfg.batch,
        channels: cfg.channels,
        height: cfg.height,
        width: cfg.width,
        kernel: cfg.kernel,
        precision: T::DTYPE,
        threads: crate::parallel::current_threads(),
        iterations: cfg.iterations,
        median_ms: percentile(&t, 50.0),
        p95_ms: percentile(&t, 95.0),
        min_ms: t[0],
        flops,
        params,
    })
}

/// Times every configured method in order, reporting each row as it lands.
pub fn run_bench(cfg: &BenchConfig, mut progress: impl FnMut(&BenchRow)) -> Result<Vec<BenchRow>> {
    cfg.validate()?;
    let mut rows = Vec::with_capacity(cfg.methods.len());
    for &m in &cfg.methods {
        let row = match cfg.precision {
            DType::F32 => bench_method::<f32>(cfg, m)?,
            DType::F64 => bench_method::<f64>(cfg, m)?,
        };
        progress(&row);
        rows.push(row);
    }
    Ok(rows)
}
