//! The epoch loop: shuffling, augmentation, optimizer steps, evaluation,
//! CSV logging and per-epoch checkpoints.

use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::augment::{augment, AugmentConfig};
use super::checkpoint::{Checkpoint, CheckpointMeta};
use super::data::{Dataset, DatasetKind};
use super::loss::{correct, cross_entropy_bwd, cross_entropy_fwd};
use super::optim::{AdamW, AdamWConfig};
use super::schedule::{lr_at, ScheduleConfig};
use crate::error::{ensure, Error, Result};
use crate::network::{Network, NetworkConfig};
use crate::ops::norm::Mode;
use crate::scalar::{DType, Scalar};

/// A complete, reproducible training run description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub network: NetworkConfig,
    pub dataset: DatasetKind,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub optimizer: AdamWConfig,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_eval_batch")]
    pub eval_batch_size: usize,
    /// Crop and flip; off when absent.
    #[serde(default)]
    pub augment: Option<AugmentConfig>,
    /// Use only the first `n` training items.
    #[serde(default)]
    pub train_limit: Option<usize>,
    #[serde(default)]
    pub test_limit: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_precision")]
    pub precision: DType,
    /// Log an epoch-0 row with the untrained network's loss and accuracy.
    #[serde(default = "default_true")]
    pub log_initial_loss: bool,
}

fn default_batch() -> usize {
    128
}
fn default_eval_batch() -> usize {
    256
}
fn default_precision() -> DType {
    DType::F64
}
fn default_true() -> bool {
    true
}

impl TrainConfig {
    pub fn new(network: NetworkConfig, dataset: DatasetKind) -> Self {
        Self {
            network,
            dataset,
            schedule: ScheduleConfig::default(),
            optimizer: AdamWConfig::default(),
            batch_size: default_batch(),
            eval_batch_size: default_eval_batch(),
            augment: None,
            train_limit: None,
            test_limit: None,
            seed: 0,
            precision: default_precision(),
            log_initial_loss: true,
        }
    }

    /// Both splits from `dir`, cut to the configured limits.
    pub fn load_datasets(&self, dir: &Path) -> Result<(Dataset, Dataset)> {
        let mut train = super::data::load(self.dataset, dir, super::data::Split::Train)?;
        let mut test = super::data::load(self.dataset, dir, super::data::Split::Test)?;
        if let Some(n) = self.train_limit {
            train.truncate(n);
        }
        if let Some(n) = self.test_limit {
            test.truncate(n);
        }
        Ok((train, test))
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.schedule.validate()?;
        ensure!(self.batch_size >= 1 && self.eval_batch_size >= 1, Config, "batch sizes must be at least 1");
        let [c, _, _] = self.dataset.image_shape();
        ensure!(
            self.network.in_channels() == c,
            Config,
            "network takes {} input channels, {:?} images have {c}",
            self.network.in_channels(),
            self.dataset
        );
        ensure!(
            self.network.num_classes() >= self.dataset.num_classes(),
            Config,
            "network has {} outputs, {:?} has {} classes",
            self.network.num_classes(),
            self.dataset,
            self.dataset.num_classes()
        );
        Ok(())
    }
}

/// One CSV row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub eval_acc: f64,
    pub wall_seconds: f64,
}

pub const LOG_FILE: &str = "train.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.kacv";

/// Loss and accuracy count of one optimizer step.
#[derive(Clone, Copy, Debug)]
pub struct StepOutcome {
    pub loss: f64,
    pub correct: usize,
}

/// Forward, backward, AdamW update and running-statistics update on one batch.
/// The loss is checked before anything is modified.
pub fn train_step<T: Scalar>(
    net: &mut Network<T>,
    opt: &mut AdamW<T>,
    x: &crate::Tensor<T>,
    labels: &[usize],
    lr: f64,
) -> Result<StepOutcome> {
    let (logits, cache) = net.forward(x, Mode::Train)?;
    let loss = cross_entropy_fwd(&logits, labels)?;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss { epoch: 0, step: opt.step as usize });
    }
    let hits = correct(&logits, labels)?;
    let (_, grads) = net.backward(&cross_entropy_bwd(&logits, labels)?, &cache)?;
    let (names, decay): (Vec<String>, Vec<bool>) = net.params().into_iter().map(|p| (p.name, p.decay)).unzip();
    opt.step(&mut net.params_mut(), &grads, &decay, &names, lr)?;
    net.update_running(&cache);
    Ok(StepOutcome { loss, correct: hits })
}

/// Top-1 accuracy in eval mode.
pub fn evaluate<T: Scalar>(net: &Network<T>, ds: &Dataset, batch_size: usize) -> Result<f64> {
    ensure!(!ds.is_empty(), Data, "cannot evaluate on an empty dataset");
    let mut hits = 0;
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(batch_size) {
        let (x, y) = ds.batch::<T>(chunk);
        hits += correct(&net.infer(&x)?, &y)?;
    }
    Ok(hits as f64 / ds.len() as f64)
}

/// Mean train-mode loss over sequential batches, without updating anything.
pub fn mean_loss<T: Scalar>(net: &Network<T>, ds: &Dataset, batch_size: usize) -> Result<f64> {
    let idx: Vec<usize> = (0..ds.len()).collect();
    let (mut total, mut count) = (0.0, 0);
    for chunk in batches(&idx, batch_size) {
        let (x, y) = ds.batch::<T>(chunk);
        total += cross_entropy_fwd(&net.forward(&x, Mode::Train)?.0, &y)?;
        count += 1;
    }
    Ok(total / count as f64)
}

/// Full batches only, unless the data is smaller than one batch.
fn batches(idx: &[usize], size: usize) -> impl Iterator<Item = &[usize]> {
    let size = size.min(idx.len()).max(1);
    idx.chunks_exact(size)
}

/// Independent deterministic stream per `(seed, epoch, purpose)`.
fn epoch_rng(seed: u64, epoch: usize, purpose: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(epoch as u64 * 4 + purpose);
    r
}

pub struct Trainer<T: Scalar> {
    cfg: TrainConfig,
    net: Network<T>,
    opt: AdamW<T>,
    epoch: usize,
    step: usize,
    out: Option<PathBuf>,
}

impl<T: Scalar> Trainer<T> {
    /// Fresh network initialized from `cfg.seed`.
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let net = Network::build(&cfg.network, cfg.seed)?.cast::<T>();
        let opt = AdamW::new(cfg.optimizer, net.params().into_iter().map(|p| p.tensor));
        Ok(Self { cfg, net, opt, epoch: 0, step: 0, out: None })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let (net, opt) = ckpt.restore::<T>()?;
        let mut cfg = ckpt.meta.config.clone();
        cfg.precision = T::DTYPE;
        Ok(Self { cfg, net, opt, epoch: ckpt.meta.epoch, step: ckpt.meta.step, out: None })
    }

    /// Writes `train.csv` and `checkpoint.kacv` under `dir`.
    pub fn with_output(mut self, dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        self.out = Some(dir.to_path_buf());
        Ok(self)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn network(&self) -> &Network<T> {
        &self.net
    }

    pub fn network_mut(&mut self) -> &mut Network<T> {
        &mut self.net
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn step(&self) -> usize {
        self.step
    }

    /// Full batches per epoch; a set smaller than one batch is one step.
    pub fn steps_per_epoch(&self, train_len: usize) -> usize {
        if train_len == 0 {
            0
        } else {
            (train_len / self.cfg.batch_size).max(1)
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let meta = CheckpointMeta { config: self.cfg.clone(), epoch: self.epoch, step: self.step, seed: self.cfg.seed };
        Checkpoint::capture(meta, &self.net, &self.opt)
    }

    /// One pass over `train`; returns the mean loss and the last learning rate.
    pub fn train_epoch(&mut self, train: &Dataset) -> Result<(f64, f64)> {
        let e = self.epoch + 1;
        let spe = self.steps_per_epoch(train.len());
        ensure!(spe > 0, Data, "training set is empty");
        let mut idx: Vec<usize> = (0..train.len()).collect();
        idx.shuffle(&mut epoch_rng(self.cfg.seed, e, 0));
        let mut aug_rng = epoch_rng(self.cfg.seed, e, 1);
        let (mut total, mut lr) = (0.0, 0.0);
        let mut n = 0;
        for chunk in batches(&idx, self.cfg.batch_size) {
            let (mut x, y) = train.batch::<T>(chunk);
            if let Some(a) = &self.cfg.augment {
                x = augment(&x, a, &mut aug_rng);
            }
            lr = lr_at(self.step, &self.cfg.schedule, spe);
            let out = train_step(&mut self.net, &mut self.opt, &x, &y, lr).map_err(|err| match err {
                Error::NonFiniteLoss { .. } => Error::NonFiniteLoss { epoch: e, step: self.step },
                other => other,
            })?;
            total += out.loss;
            n += 1;
            self.step += 1;
        }
        self.epoch = e;
        Ok((total / n as f64, lr))
    }

    /// Trains up to the schedule's `total_epochs`, continuing from the
    /// current epoch, and returns the rows logged by this call.
    pub fn run(&mut self, train: &Dataset, test: &Dataset) -> Result<Vec<EpochRecord>> {
        self.run_until(train, test, self.cfg.schedule.total_epochs)
    }

    /// Like [`Self::run`] but stops after epoch `last` (for interrupted runs).
    pub fn run_until(&mut self, train: &Dataset, test: &Dataset, last: usize) -> Result<Vec<EpochRecord>> {
        self.run_observed(train, test, last, |_| {})
    }

    /// Like [`Self::run_until`], calling `on_row` as each row is logged.
    pub fn run_observed(
        &mut self,
        train: &Dataset,
        test: &Dataset,
        last: usize,
        mut on_row: impl FnMut(&EpochRecord),
    ) -> Result<Vec<EpochRecord>> {
        let start = Instant::now();
        let mut log = self.open_log()?;
        let mut rows = Vec::new();
        let mut emit = |row: EpochRecord, log: &mut Option<csv::Writer<fs::File>>| -> Result<()> {
            if let Some(w) = log {
                w.serialize(&row)?;
                w.flush()?;
            }
            on_row(&row);
            rows.push(row);
            Ok(())
        };
        if self.epoch == 0 && self.cfg.log_initial_loss {
            let loss = mean_loss(&self.net, train, self.cfg.batch_size)?;
            let acc = evaluate(&self.net, test, self.cfg.eval_batch_size)?;
            let row = EpochRecord { epoch: 0, step: 0, lr: 0.0, train_loss: loss, eval_acc: acc, wall_seconds: secs(start) };
            emit(row, &mut log)?;
        }
        while self.epoch < last.min(self.cfg.schedule.total_epochs) {
            let (loss, lr) = self.train_epoch(train)?;
            let acc = evaluate(&self.net, test, self.cfg.eval_batch_size)?;
            let row = EpochRecord { epoch: self.epoch, step: self.step, lr, train_loss: loss, eval_acc: acc, wall_seconds: secs(start) };
            emit(row, &mut log)?;
            if let Some(dir) = &self.out {
                self.checkpoint().save(&dir.join(CHECKPOINT_FILE))?;
            }
        }
        Ok(rows)
    }

    /// A new log with header for a fresh run, appended to on resume.
    fn open_log(&self) -> Result<Option<csv::Writer<fs::File>>> {
        let Some(dir) = &self.out else { return Ok(None) };
        let path = dir.join(LOG_FILE);
        let fresh = self.epoch == 0 || !path.exists();
        let file = OpenOptions::new().create(true).write(true).append(!fresh).truncate(fresh).open(&path)?;
        Ok(Some(csv::WriterBuilder::new().has_headers(fresh).from_writer(file)))
    }
}

fn secs(start: Instant) -> f64 {
    (start.elapsed().as_secs_f64() * 1000.0).round() / 1000.0
}

/// Reads a training log back.
pub fn read_log(path: &Path) -> Result<Vec<EpochRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<Vec<EpochRecord>, _>>()?)
}
