//! Grids of short training runs over activation families and replaced-layer
//! sets, reported as one table.
//!
//! Every cell has two networks. The audit network is the full VGG11 variant
//! whose parameter and FLOP counts fill the `params` and `flops` columns.
//! Its desk-sized twin, with every convolution width divided by
//! `width_divisor`, is the one actually trained for the `acc` column.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::activations::ActivationKind;
use crate::error::{ensure, Error, Result};
use crate::network::{count_flops, Network, NetworkConfig, VggConfig};
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;
use crate::training::{
    train_step, AdamW, AdamWConfig, AugmentConfig, Dataset, DatasetKind, EpochRecord, ScheduleConfig, TrainConfig,
    Trainer,
};

pub const RESULTS_FILE: &str = "ablation.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub dataset: DatasetKind,
    /// Families tried on every non-empty layer set.
    pub activations: Vec<ActivationKind>,
    /// 1-based replaced convolutions; an empty set is the plain baseline.
    pub layer_sets: Vec<Vec<usize>>,
    /// Classes of the audited network.
    pub audit_classes: usize,
    /// Classifier hidden width of the audited network.
    pub audit_hidden: usize,
    /// Square input side the FLOP column is counted at.
    pub audit_resolution: usize,
    pub width_divisor: usize,
    pub train_hidden: usize,
    pub schedule: ScheduleConfig,
    pub optimizer: AdamWConfig,
    pub batch_size: usize,
    pub augment: Option<AugmentConfig>,
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
    pub seed: u64,
    pub precision: DType,
    /// Grids whose estimated wall time exceeds this are refused.
    pub budget_seconds: f64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetKind::Cifar10,
            activations: vec![
                ActivationKind::GLinear { intervals: 2 },
                ActivationKind::PRelu,
                ActivationKind::BSpline { grid: Default::default() },
            ],
            layer_sets: vec![vec![], (1..=8).collect()],
            audit_classes: 100,
            audit_hidden: 4096,
            audit_resolution: 32,
            width_divisor: 8,
            train_hidden: 128,
            schedule: ScheduleConfig { base_lr: 2e-3, warmup_epochs: 0, total_epochs: 5, min_lr: 1e-5 },
            optimizer: AdamWConfig::default(),
            // Small batches: the narrow KA twin plateaus for ~150 steps, so
            // the step count matters more than batch statistics here.
            batch_size: 16,
            augment: None,
            train_limit: Some(2000),
            test_limit: Some(1000),
            seed: 0,
            precision: DType::F32,
            budget_seconds: 3600.0,
        }
    }
}

/// One row of the grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub index: usize,
    pub method: String,
    pub activation: Option<ActivationKind>,
    pub layers: Vec<usize>,
    pub seed: u64,
}

impl Cell {
    /// Directory name under the output root.
    pub fn slug(&self) -> String {
        let layers = if self.layers.is_empty() { "none".into() } else { layer_list(&self.layers, "-") };
        let n = self.activation.and_then(|a| a.grid_size()).map(|n| format!("-n{n}")).unwrap_or_default();
        format!("cell{:02}-{}{n}-{layers}", self.index, self.method.to_lowercase())
    }
}

fn layer_list(layers: &[usize], sep: &str) -> String {
    layers.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(sep)
}

/// SplitMix64 of the base seed and cell index: distinct, stable seeds.
pub fn cell_seed(base: u64, index: usize) -> u64 {
    let mut z = base.wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(index as u64 + 1));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl AblationConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(!self.layer_sets.is_empty(), Config, "ablation needs at least one layer set");
        ensure!(
            self.layer_sets.iter().all(|s| s.is_empty()) || !self.activations.is_empty(),
            Config,
            "non-empty layer sets need at least one activation family"
        );
        ensure!(self.width_divisor >= 1 && self.train_hidden >= 1, Config, "training widths must be positive");
        ensure!(self.audit_resolution >= 32, Config, "VGG11 needs inputs of at least 32 pixels");
        ensure!(self.budget_seconds > 0.0, Config, "budget must be positive");
        for c in self.cells() {
            self.audit_network(&c).validate()?;
        }
        if self.schedule.total_epochs > 0 {
            self.schedule.validate()?;
            for c in self.cells() {
                self.train_config(&c).validate()?;
            }
        }
        Ok(())
    }

    /// The baseline once (if requested), then every family on every
    /// non-empty set, in config order.
    pub fn cells(&self) -> Vec<Cell> {
        let mut cells = Vec::new();
        let mut push = |activation: Option<ActivationKind>, layers: Vec<usize>| {
            let index = cells.len();
            let method = match activation {
                None => "VGG11".to_string(),
                Some(a) => format!("KAVGG11-{}", a.label()),
            };
            cells.push(Cell { index, method, activation, layers, seed: cell_seed(self.seed, index) });
        };
        if self.layer_sets.iter().any(|s| s.is_empty()) {
            push(None, vec![]);
        }
        for a in &self.activations {
            for s in self.layer_sets.iter().filter(|s| !s.is_empty()) {
                push(Some(*a), s.clone());
            }
        }
        cells
    }

    fn vgg(&self, cell: &Cell) -> VggConfig {
        let mut v = VggConfig::new(cell.layers.clone(), cell.activation.unwrap_or_default());
        v.in_channels = self.dataset.image_shape()[0];
        v
    }

    /// Full-width network behind the `params` and `flops` columns.
    pub fn audit_network(&self, cell: &Cell) -> NetworkConfig {
        let mut v = self.vgg(cell);
        v.num_classes = self.audit_classes;
        v.hidden = self.audit_hidden;
        NetworkConfig::Vgg(v)
    }

    /// The run a cell trains; the same config given to `train` reproduces it.
    pub fn train_config(&self, cell: &Cell) -> TrainConfig {
        let mut v = self.vgg(cell);
        v.num_classes = self.dataset.num_classes();
        v.hidden = self.train_hidden;
        v.width_divisor = self.width_divisor;
        let mut t = TrainConfig::new(NetworkConfig::Vgg(v), self.dataset);
        t.schedule = self.schedule;
        t.optimizer = self.optimizer;
        t.batch_size = self.batch_size;
        t.augment = self.augment;
        t.train_limit = self.train_limit;
        t.test_limit = self.test_limit;
        t.seed = cell.seed;
        t.precision = self.precision;
        t
    }

    /// Forward MACs per sample summed over the forward, backward (≈ 2×) and
    /// evaluation passes of every cell.
    pub fn planned_macs(&self, train_len: usize, test_len: usize) -> Result<f64> {
        let [c, h, w] = self.dataset.image_shape();
        let mut total = 0.0;
        for cell in self.cells() {
            let net = Network::<f64>::build(&self.train_config(&cell).network, 0)?;
            let per = count_flops(&net, [c, h, w])? as f64;
            let epochs = self.schedule.total_epochs as f64;
            total += per * (3.0 * train_len as f64 * epochs + test_len as f64 * (epochs + 1.0) + train_len as f64);
        }
        Ok(total)
    }
}

/// CSV row: the table columns first, then run details.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub method: String,
    pub n: Option<usize>,
    pub acc: Option<f64>,
    pub params: usize,
    pub flops: u64,
    pub layers: String,
    pub train_params: usize,
    pub epochs: usize,
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
    /// Epoch-to-epoch decreases of the mean training loss, epoch 0 included.
    pub loss_decreases: usize,
    pub seed: u64,
}

/// Measures seconds per forward MAC with one training step of `cell`'s
/// network on random data, so refusals carry a machine-specific estimate.
fn calibrate<T: Scalar>(cfg: &AblationConfig, cell: &Cell) -> Result<f64> {
    let tc = cfg.train_config(cell);
    let mut net = Network::build(&tc.network, 0)?.cast::<T>();
    let mut opt = AdamW::new(tc.optimizer, net.params().into_iter().map(|p| p.tensor));
    let [c, h, w] = cfg.dataset.image_shape();
    let n = cfg.batch_size;
    let x = Tensor::<f64>::uniform(&[n, c, h, w], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(0)).cast::<T>();
    let labels: Vec<usize> = (0..n).map(|i| i % cfg.dataset.num_classes()).collect();
    let macs = count_flops(&net, [c, h, w])? as f64 * 3.0 * n as f64;
    let start = Instant::now();
    train_step(&mut net, &mut opt, &x, &labels, 0.0)?;
    Ok(start.elapsed().as_secs_f64() / macs)
}

fn train_cell<T: Scalar>(tc: TrainConfig, train: &Dataset, test: &Dataset, dir: &Path) -> Result<(Vec<EpochRecord>, usize)> {
    let mut t = Trainer::<T>::new(tc)?.with_output(dir)?;
    let params = t.network().param_count();
    Ok((t.run(train, test)?, params))
}

/// Runs (or, with zero epochs, only audits) every cell, writing
/// `ablation.csv` plus one training directory per cell under `out`.
///
/// `data_dir` is only read when there is something to train.
pub fn run_ablation(
    cfg: &AblationConfig,
    data_dir: &Path,
    out: &Path,
    mut progress: impl FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    let cells = cfg.cells();
    let epochs = cfg.schedule.total_epochs;
    let data = if epochs > 0 {
        let probe = cfg.train_config(&cells[0]);
        let (train, test) = probe.load_datasets(data_dir)?;
        let spm = match cfg.precision {
            DType::F32 => calibrate::<f32>(cfg, cells.last().expect("validated"))?,
            DType::F64 => calibrate::<f64>(cfg, cells.last().expect("validated"))?,
        };
        let estimate = cfg.planned_macs(train.len(), test.len())? * spm;
        if estimate > cfg.budget_seconds {
            return Err(Error::Config(format!(
                "ablation grid of {} cells × {epochs} epochs on {} images needs about {estimate:.0} s, over the {:.0} s \
                 budget; shrink the grid, epochs or train_limit, or raise budget_seconds",
                cells.len(),
                train.len(),
                cfg.budget_seconds
            )));
        }
        Some((train, test))
    } else {
        None
    };
    fs::create_dir_all(out)?;
    let audit_hw = cfg.audit_resolution;
    let mut rows = Vec::with_capacity(cells.len());
    for cell in &cells {
        let audit = Network::<f64>::build(&cfg.audit_network(cell), 0)?;
        let params = audit.param_count();
        let flops = count_flops(&audit, [cfg.dataset.image_shape()[0], audit_hw, audit_hw])?;
        drop(audit);
        let tc = cfg.train_config(cell);
        let (log, train_params) = match &data {
            Some((train, test)) => {
                let dir = out.join(cell.slug());
                fs::create_dir_all(&dir)?;
                fs::write(dir.join("config.json"), serde_json::to_string_pretty(&tc)?)?;
                match cfg.precision {
                    DType::F32 => train_cell::<f32>(tc, train, test, &dir)?,
                    DType::F64 => train_cell::<f64>(tc, train, test, &dir)?,
                }
            }
            None => (Vec::new(), Network::<f64>::build(&tc.network, 0)?.param_count()),
        };
        let losses: Vec<f64> = log.iter().map(|r| r.train_loss).collect();
        let row = AblationRow {
            method: cell.method.clone(),
            n: cell.activation.and_then(|a| a.grid_size()),
            acc: log.last().map(|r| r.eval_acc),
            params,
            flops,
            layers: layer_list(&cell.layers, " "),
            train_params,
            epochs,
            initial_loss: losses.first().copied(),
            final_loss: losses.last().copied(),
            loss_decreases: losses.windows(2).filter(|w| w[1] < w[0]).count(),
            seed: cell.seed,
        };
        progress(&row);
        rows.push(row);
        write_rows(&out.join(RESULTS_FILE), &rows)?;
    }
    Ok(rows)
}

fn write_rows(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rows(path: &Path) -> Result<Vec<AblationRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<Vec<AblationRow>, _>>()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Every CIFAR-10 file holding `n` records of random pixels.
    fn write_fake_cifar(dir: &Path, n: usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for split in [crate::training::Split::Train, crate::training::Split::Test] {
            for f in DatasetKind::Cifar10.files(split) {
                let mut b = Vec::with_capacity(n * 3073);
                for i in 0..n {
                    b.push((i % 10) as u8);
                    b.extend((0..3072).map(|_| rand::Rng::gen::<u8>(&mut rng)));
                }
                fs::write(dir.join(f), b).unwrap();
            }
        }
    }

    fn count_only() -> AblationConfig {
        AblationConfig {
            activations: vec![ActivationKind::GLinear { intervals: 2 }],
            schedule: ScheduleConfig { total_epochs: 0, ..AblationConfig::default().schedule },
            ..AblationConfig::default()
        }
    }

    #[test]
    fn cells_put_the_baseline_first_and_once() {
        let mut cfg = AblationConfig::default();
        cfg.layer_sets = vec![vec![1, 2], vec![], vec![3, 4]];
        let cells = cfg.cells();
        assert_eq!(cells.len(), 1 + 3 * 2);
        assert_eq!(cells[0].method, "VGG11");
        assert!(cells[0].layers.is_empty());
        assert_eq!(cells[1].method, "KAVGG11-glinear");
        assert_eq!(cells[1].layers, [1, 2]);
        assert_eq!(cells[2].layers, [3, 4]);
        assert_eq!(cells[6].method, "KAVGG11-bspline");
    }

    #[test]
    fn cell_seeds_differ_and_are_stable() {
        let cells = AblationConfig::default().cells();
        let mut seeds: Vec<u64> = cells.iter().map(|c| c.seed).collect();
        assert_eq!(seeds, AblationConfig::default().cells().iter().map(|c| c.seed).collect::<Vec<_>>());
        seeds.sort();
        seeds.dedup();
        assert_eq!(seeds.len(), cells.len());
        let other = AblationConfig { seed: 1, ..AblationConfig::default() };
        assert_ne!(other.cells()[0].seed, cells[0].seed);
        assert_eq!(cell_seed(0, 0), cells[0].seed);
    }

    #[test]
    fn count_only_grid_reports_full_size_counts() {
        let dir = tempfile::tempdir().unwrap();
        let rows = run_ablation(&count_only(), Path::new("/nonexistent"), dir.path(), |_| {}).unwrap();
        assert_eq!(rows.len(), 2);
        let (base, ka) = (&rows[0], &rows[1]);
        assert!((base.params as f64 / 29.0e6 - 1.0).abs() < 0.10, "{}", base.params);
        assert!((ka.params as f64 / 39.8e6 - 1.0).abs() < 0.10, "{}", ka.params);
        assert!(ka.flops > base.flops);
        assert!(base.acc.is_none() && base.train_params < base.params);
        assert_eq!(ka.layers, "1 2 3 4 5 6 7 8");
        assert_eq!(read_rows(&dir.path().join(RESULTS_FILE)).unwrap(), rows);
        let header = fs::read_to_string(dir.path().join(RESULTS_FILE)).unwrap();
        assert!(header.starts_with("method,n,acc,params,flops,"));
    }

    #[test]
    fn oversized_grid_is_refused_with_an_estimate() {
        let dir = tempfile::tempdir().unwrap();
        let data = tempfile::tempdir().unwrap();
        write_fake_cifar(data.path(), 64);
        let cfg = AblationConfig { budget_seconds: 1e-6, train_limit: None, ..count_only() };
        let cfg = AblationConfig { schedule: ScheduleConfig { total_epochs: 3, ..cfg.schedule }, ..cfg };
        let err = run_ablation(&cfg, data.path(), dir.path(), |_| {}).unwrap_err().to_string();
        assert!(err.contains("needs about") && err.contains("budget"), "{err}");
        assert!(!dir.path().join(RESULTS_FILE).exists());
    }

    #[test]
    fn invalid_grids_are_config_errors() {
        let bad = AblationConfig { layer_sets: vec![vec![9]], ..count_only() };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let none = AblationConfig { activations: vec![], ..count_only() };
        assert!(matches!(none.validate(), Err(Error::Config(_))));
        let base_only = AblationConfig { activations: vec![], layer_sets: vec![vec![]], ..count_only() };
        assert!(base_only.validate().is_ok());
    }
}
