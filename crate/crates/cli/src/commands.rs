use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::Args;
use kaconv::ablation::{self, AblationConfig};
use kaconv::bench::{self, BenchConfig, BenchMethod};
use kaconv::gradcheck::suite::{op_names, run_suite, SuiteOptions};
use kaconv::network::{KaConvNetConfig, Network, NetworkConfig};
use kaconv::training::{
    evaluate, load, Checkpoint, DatasetKind, EpochRecord, ScheduleConfig, Split, TrainConfig, Trainer, CHECKPOINT_FILE,
};
use kaconv::{DType, Error, Result, Scalar};
use log::info;
use serde::Serialize;

use crate::layered;
use crate::Global;

pub const CONFIG_FILE: &str = "config.json";

fn parse_dataset(s: &str) -> std::result::Result<DatasetKind, String> {
    serde_json::from_value(serde_json::Value::String(s.to_lowercase()))
        .map_err(|_| format!("unknown dataset `{s}`; expected mnist, cifar10 or cifar100"))
}

/// The desk-scale run: a four-stage KAConvNet with one block per stage on MNIST.
pub fn default_train_config() -> TrainConfig {
    let mut net = KaConvNetConfig::new([1, 1, 1, 1], [16, 32, 48, 64], 10);
    net.in_channels = 1;
    net.se_reduction = 4;
    net.head_hidden = 0;
    let mut cfg = TrainConfig::new(NetworkConfig::KaConvNet(net), DatasetKind::Mnist);
    cfg.schedule = ScheduleConfig { base_lr: 2e-3, warmup_epochs: 0, total_epochs: 5, min_lr: 1e-5 };
    cfg.batch_size = 64;
    cfg.precision = DType::F32;
    cfg
}

fn fit_to_dataset(net: &mut NetworkConfig, kind: DatasetKind) {
    let (c, k) = (kind.image_shape()[0], kind.num_classes());
    match net {
        NetworkConfig::KaConvNet(n) => (n.in_channels, n.num_classes) = (c, k),
        NetworkConfig::Vgg(n) => (n.in_channels, n.num_classes) = (c, k),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

/// Network and data flags shared by `train` and `eval`.
#[derive(Args, Debug)]
pub struct RunFlags {
    /// Network preset, resized to the dataset's channels and classes.
    #[arg(long, value_name = "NAME")]
    preset: Option<String>,
    #[arg(long, value_parser = parse_dataset, value_name = "NAME")]
    dataset: Option<DatasetKind>,
    /// Use only the first N training images.
    #[arg(long, value_name = "N")]
    train_limit: Option<usize>,
    /// Use only the first N test images.
    #[arg(long, value_name = "N")]
    test_limit: Option<usize>,
}

fn resolve_train(g: &Global, f: &RunFlags) -> Result<TrainConfig> {
    let mut cfg = layered::load(&default_train_config(), g.config.as_deref())?;
    if let Some(name) = &f.preset {
        cfg.network = NetworkConfig::preset(name)?;
        fit_to_dataset(&mut cfg.network, f.dataset.unwrap_or(cfg.dataset));
    }
    if let Some(d) = f.dataset {
        cfg.dataset = d;
        fit_to_dataset(&mut cfg.network, d);
    }
    if f.train_limit.is_some() {
        cfg.train_limit = f.train_limit;
    }
    if f.test_limit.is_some() {
        cfg.test_limit = f.test_limit;
    }
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if g.f32 {
        cfg.precision = DType::F32;
    }
    Ok(cfg)
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    run: RunFlags,
    /// Total epochs of the schedule (also extends a resumed run).
    #[arg(long, value_name = "N")]
    epochs: Option<usize>,
    #[arg(long, value_name = "N")]
    batch_size: Option<usize>,
    /// Peak learning rate.
    #[arg(long, value_name = "LR")]
    lr: Option<f64>,
    /// Continue from the checkpoint in the output directory.
    #[arg(long)]
    resume: bool,
}

pub fn train(g: &Global, a: TrainArgs) -> Result<ExitCode> {
    fs::create_dir_all(&g.out)?;
    let ckpt_path = g.out.join(CHECKPOINT_FILE);
    let ckpt = if a.resume {
        let mut ck = Checkpoint::load(&ckpt_path)?;
        if let Some(e) = a.epochs {
            ck.meta.config.schedule.total_epochs = e;
        }
        if g.f32 {
            ck.meta.config.precision = DType::F32;
        }
        info!("resuming from {} at epoch {}", ckpt_path.display(), ck.meta.epoch);
        Some(ck)
    } else {
        None
    };
    let cfg = match &ckpt {
        Some(ck) => ck.meta.config.clone(),
        None => {
            let mut cfg = resolve_train(g, &a.run)?;
            if let Some(e) = a.epochs {
                cfg.schedule.total_epochs = e;
            }
            if let Some(b) = a.batch_size {
                cfg.batch_size = b;
            }
            if let Some(lr) = a.lr {
                cfg.schedule.base_lr = lr;
            }
            cfg
        }
    };
    cfg.validate()?;
    write_json(&g.out.join(CONFIG_FILE), &cfg)?;
    let (train_set, test_set) = cfg.load_datasets(&g.data)?;
    info!("{:?}: {} training and {} test images", cfg.dataset, train_set.len(), test_set.len());
    let rows = match cfg.precision {
        DType::F32 => train_with::<f32>(cfg, ckpt.as_ref(), &g.out, &train_set, &test_set)?,
        DType::F64 => train_with::<f64>(cfg, ckpt.as_ref(), &g.out, &train_set, &test_set)?,
    };
    if let Some(last) = rows.last() {
        println!("final test accuracy {:.4}", last.eval_acc);
    }
    Ok(ExitCode::SUCCESS)
}

fn print_row_header() {
    println!("{:>5} {:>8} {:>10} {:>10} {:>8} {:>9}", "epoch", "step", "lr", "loss", "acc", "seconds");
}

fn print_row(r: &EpochRecord) {
    println!(
        "{:>5} {:>8} {:>10.3e} {:>10.5} {:>8.4} {:>9.1}",
        r.epoch, r.step, r.lr, r.train_loss, r.eval_acc, r.wall_seconds
    );
}

fn train_with<T: Scalar>(
    cfg: TrainConfig,
    ckpt: Option<&Checkpoint>,
    out: &Path,
    train_set: &kaconv::training::Dataset,
    test_set: &kaconv::training::Dataset,
) -> Result<Vec<EpochRecord>> {
    let t = match ckpt {
        Some(ck) => Trainer::<T>::from_checkpoint(ck)?,
        None => Trainer::<T>::new(cfg)?,
    };
    let mut t = t.with_output(out)?;
    info!("{} parameters, {} steps per epoch", t.network().param_count(), t.steps_per_epoch(train_set.len()));
    print_row_header();
    let last = t.config().schedule.total_epochs;
    t.run_observed(train_set, test_set, last, print_row)
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    run: RunFlags,
    /// Checkpoint to evaluate; without it a fresh network from the config is used.
    #[arg(long, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
}

pub fn eval(g: &Global, a: EvalArgs) -> Result<ExitCode> {
    let (cfg, net) = match &a.checkpoint {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            let (net, _) = ck.restore::<f64>()?;
            let mut cfg = ck.meta.config;
            if a.run.test_limit.is_some() {
                cfg.test_limit = a.run.test_limit;
            }
            (cfg, net)
        }
        None => {
            let cfg = resolve_train(g, &a.run)?;
            cfg.validate()?;
            let net = Network::build(&cfg.network, cfg.seed)?;
            (cfg, net)
        }
    };
    let mut test_set = load(cfg.dataset, &g.data, Split::Test)?;
    if let Some(n) = cfg.test_limit {
        test_set.truncate(n);
    }
    let acc = if g.f32 || (a.checkpoint.is_some() && cfg.precision == DType::F32) {
        evaluate(&net.cast::<f32>(), &test_set, cfg.eval_batch_size)?
    } else {
        evaluate(&net, &test_set, cfg.eval_batch_size)?
    };
    println!("accuracy {acc:.4} on {} {:?} test images", test_set.len(), cfg.dataset);
    Ok(ExitCode::SUCCESS)
}

#[derive(Args, Debug)]
pub struct SummaryArgs {
    /// Network preset; defaults to kaconvnet-s.
    #[arg(long, value_name = "NAME")]
    preset: Option<String>,
    /// Square input side; 224 for KAConvNet, 32 for VGG by default.
    #[arg(long, value_name = "PX")]
    resolution: Option<usize>,
    /// Print CSV instead of a table.
    #[arg(long)]
    csv: bool,
}

#[derive(Serialize)]
struct SummaryRow<'a> {
    layer: String,
    kind: &'a str,
    output: String,
    params: usize,
    macs: u64,
}

/// A config file may hold a bare network or a training config with one.
fn network_from_file(path: &Path) -> Result<NetworkConfig> {
    let mut v = layered::read_json(path)?;
    if let Some(net) = v.get_mut("network") {
        v = net.take();
    }
    serde_json::from_value(v).map_err(|e| Error::Config(format!("config {}: {e}", path.display())))
}

pub fn summary(g: &Global, a: SummaryArgs) -> Result<ExitCode> {
    let cfg = match (&a.preset, &g.config) {
        (Some(p), _) => NetworkConfig::preset(p)?,
        (None, Some(path)) => network_from_file(path)?,
        (None, None) => NetworkConfig::preset("kaconvnet-s")?,
    };
    let res = a.resolution.unwrap_or(match cfg {
        NetworkConfig::Vgg(_) => 32,
        NetworkConfig::KaConvNet(_) => 224,
    });
    let net = Network::<f64>::build(&cfg, g.seed.unwrap_or(0))?;
    let s = net.summary([cfg.in_channels(), res, res])?;
    if a.csv {
        let mut w = csv::Writer::from_writer(std::io::stdout());
        for r in &s.rows {
            let output = r.out_shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x");
            w.serialize(SummaryRow { layer: r.index.to_string(), kind: r.kind, output, params: r.params, macs: r.macs })?;
        }
        w.serialize(SummaryRow { layer: "total".into(), kind: "", output: String::new(), params: s.params(), macs: s.macs() })?;
        w.flush()?;
    } else {
        print!("{s}");
    }
    Ok(ExitCode::SUCCESS)
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Random problems per op.
    #[arg(long, value_name = "N")]
    instances: Option<usize>,
    /// Only ops whose name contains this string.
    #[arg(long, value_name = "TEXT")]
    filter: Option<String>,
    /// Negate one op's analytic gradients to confirm the suite catches it.
    #[arg(long, value_name = "OP")]
    sign_flip: Option<String>,
    /// List the op names and exit.
    #[arg(long)]
    list: bool,
}

pub fn gradcheck(g: &Global, a: GradcheckArgs) -> Result<ExitCode> {
    if a.list {
        op_names().iter().for_each(|n| println!("{n}"));
        return Ok(ExitCode::SUCCESS);
    }
    let mut opts = layered::load(&SuiteOptions::default(), g.config.as_deref())?;
    if let Some(n) = a.instances {
        opts.instances = n;
    }
    if a.filter.is_some() {
        opts.filter = a.filter;
    }
    if a.sign_flip.is_some() {
        opts.sign_flip = a.sign_flip;
    }
    if let Some(s) = g.seed {
        opts.seed = s;
    }
    if g.f32 {
        log::warn!("gradcheck always runs in 64-bit; --f32 ignored");
    }
    let report = run_suite(&opts)?;
    println!("{report}");
    if report.passed() {
        println!("all {} ops passed", report.ops.len());
        Ok(ExitCode::SUCCESS)
    } else {
        println!("FAILED: {}", report.failures().iter().map(|o| o.op.as_str()).collect::<Vec<_>>().join(", "));
        Ok(ExitCode::from(1))
    }
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long, value_name = "N")]
    batch: Option<usize>,
    /// Input and output channels.
    #[arg(long, value_name = "N")]
    channels: Option<usize>,
    /// Square spatial side.
    #[arg(long, value_name = "PX")]
    size: Option<usize>,
    #[arg(long, value_name = "K")]
    kernel: Option<usize>,
    #[arg(long, value_name = "N")]
    warmup: Option<usize>,
    #[arg(long, value_name = "N")]
    iterations: Option<usize>,
    /// Comma-separated subset of glinear, bspline, conv.
    #[arg(long, value_delimiter = ',', value_parser = parse_method, value_name = "LIST")]
    methods: Option<Vec<BenchMethod>>,
    /// Time in 64-bit floats instead of the default 32-bit.
    #[arg(long, conflicts_with = "f32")]
    f64: bool,
}

fn parse_method(s: &str) -> std::result::Result<BenchMethod, String> {
    serde_json::from_value(serde_json::Value::String(s.to_lowercase()))
        .map_err(|_| format!("unknown method `{s}`; expected glinear, bspline or conv"))
}

pub fn bench(g: &Global, a: BenchArgs) -> Result<ExitCode> {
    let mut cfg = layered::load(&BenchConfig::default(), g.config.as_deref())?;
    let set = |slot: &mut usize, v: Option<usize>| {
        if let Some(v) = v {
            *slot = v;
        }
    };
    set(&mut cfg.batch, a.batch);
    set(&mut cfg.channels, a.channels);
    set(&mut cfg.height, a.size);
    set(&mut cfg.width, a.size);
    set(&mut cfg.kernel, a.kernel);
    set(&mut cfg.warmup, a.warmup);
    set(&mut cfg.iterations, a.iterations);
    if let Some(m) = a.methods {
        cfg.methods = m;
    }
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if g.f32 {
        cfg.precision = DType::F32;
    }
    if a.f64 {
        cfg.precision = DType::F64;
    }
    cfg.validate()?;
    fs::create_dir_all(&g.out)?;
    write_json(&g.out.join("bench.json"), &cfg)?;
    info!(
        "{}x{}x{}x{}, K={}, {} warmup + {} timed iterations, {:?}",
        cfg.batch, cfg.channels, cfg.height, cfg.width, cfg.kernel, cfg.warmup, cfg.iterations, cfg.precision
    );
    println!("{:<16} {:>11} {:>11} {:>11} {:>14}", "method", "median ms", "p95 ms", "min ms", "MACs/sample");
    let rows = bench::run_bench(&cfg, |r| {
        println!("{:<16} {:>11.2} {:>11.2} {:>11.2} {:>14}", r.method, r.median_ms, r.p95_ms, r.min_ms, r.flops)
    })?;
    let path = g.out.join(bench::RESULTS_FILE);
    let mut w = csv::Writer::from_path(&path)?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    info!("wrote {}", path.display());
    Ok(ExitCode::SUCCESS)
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    /// Epochs per cell; 0 only audits parameter and MAC counts.
    #[arg(long, value_name = "N")]
    epochs: Option<usize>,
    /// Refuse grids estimated to take longer than this.
    #[arg(long, value_name = "SECONDS")]
    budget_seconds: Option<f64>,
    #[arg(long, value_name = "N")]
    train_limit: Option<usize>,
    #[arg(long, value_name = "N")]
    test_limit: Option<usize>,
}

pub fn ablate(g: &Global, a: AblateArgs) -> Result<ExitCode> {
    let mut cfg = layered::load(&AblationConfig::default(), g.config.as_deref())?;
    if let Some(e) = a.epochs {
        cfg.schedule.total_epochs = e;
    }
    if let Some(b) = a.budget_seconds {
        cfg.budget_seconds = b;
    }
    if a.train_limit.is_some() {
        cfg.train_limit = a.train_limit;
    }
    if a.test_limit.is_some() {
        cfg.test_limit = a.test_limit;
    }
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if g.f32 {
        cfg.precision = DType::F32;
    }
    fs::create_dir_all(&g.out)?;
    write_json(&g.out.join("ablation.json"), &cfg)?;
    info!("{} cells, {} epochs each", cfg.cells().len(), cfg.schedule.total_epochs);
    println!("{:<18} {:>3} {:>8} {:>12} {:>14}  layers", "method", "n", "acc", "params", "MACs");
    ablation::run_ablation(&cfg, &g.data, &g.out, |r| {
        let n = r.n.map_or("-".into(), |n| n.to_string());
        let acc = r.acc.map_or("-".into(), |a| format!("{a:.4}"));
        println!("{:<18} {n:>3} {acc:>8} {:>12} {:>14}  {}", r.method, r.params, r.flops, r.layers);
    })?;
    info!("wrote {}", g.out.join(ablation::RESULTS_FILE).display());
    Ok(ExitCode::SUCCESS)
}
