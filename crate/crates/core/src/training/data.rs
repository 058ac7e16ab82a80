//! MNIST (IDX) and CIFAR (binary batch) readers.
//!
//! Images are stored normalized as `f32` to halve memory and converted to the
//! training precision when a batch is assembled.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Mnist,
    Cifar10,
    Cifar100,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl DatasetKind {
    pub fn image_shape(self) -> [usize; 3] {
        match self {
            DatasetKind::Mnist => [1, 28, 28],
            _ => [3, 32, 32],
        }
    }

    pub fn num_classes(self) -> usize {
        match self {
            DatasetKind::Cifar100 => 100,
            _ => 10,
        }
    }

    /// Published per-channel mean and standard deviation of the training set.
    pub fn normalization(self) -> (&'static [f32], &'static [f32]) {
        match self {
            DatasetKind::Mnist => (&[0.1307], &[0.3081]),
            DatasetKind::Cifar10 => (&[0.4914, 0.4822, 0.4465], &[0.2470, 0.2435, 0.2616]),
            DatasetKind::Cifar100 => (&[0.5071, 0.4865, 0.4409], &[0.2673, 0.2564, 0.2762]),
        }
    }

    fn subdir(self) -> &'static str {
        match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::Cifar10 => "cifar-10-batches-bin",
            DatasetKind::Cifar100 => "cifar-100-binary",
        }
    }

    /// Expected file names for a split.
    pub fn files(self, split: Split) -> Vec<String> {
        match (self, split) {
            (DatasetKind::Mnist, Split::Train) => vec!["train-images-idx3-ubyte".into(), "train-labels-idx1-ubyte".into()],
            (DatasetKind::Mnist, Split::Test) => vec!["t10k-images-idx3-ubyte".into(), "t10k-labels-idx1-ubyte".into()],
            (DatasetKind::Cifar10, Split::Train) => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
            (DatasetKind::Cifar10, Split::Test) => vec!["test_batch.bin".into()],
            (DatasetKind::Cifar100, Split::Train) => vec!["train.bin".into()],
            (DatasetKind::Cifar100, Split::Test) => vec!["test.bin".into()],
        }
    }

    /// `dir/<canonical subdirectory>` when it exists, else `dir` itself.
    pub fn locate(self, dir: &Path) -> PathBuf {
        let sub = dir.join(self.subdir());
        if sub.is_dir() {
            sub
        } else {
            dir.to_path_buf()
        }
    }
}

/// Labelled images of one split.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    kind: DatasetKind,
    images: Vec<f32>,
    labels: Vec<u8>,
}

impl Dataset {
    /// Normalizes raw `u8` pixels laid out as `[N, C, H, W]`.
    pub fn from_raw(kind: DatasetKind, pixels: &[u8], labels: Vec<u8>) -> Result<Self> {
        let per = kind.image_shape().iter().product::<usize>();
        ensure!(pixels.len() == labels.len() * per, Length, "{} pixels for {} images of {per}", pixels.len(), labels.len());
        if let Some(&bad) = labels.iter().find(|&&y| y as usize >= kind.num_classes()) {
            return Err(Error::Data(format!("label {bad} is outside 0..{}", kind.num_classes())));
        }
        let (mean, std) = kind.normalization();
        let plane = per / mean.len();
        let images = pixels
            .iter()
            .enumerate()
            .map(|(i, &p)| {
                let c = (i % per) / plane;
                (p as f32 / 255.0 - mean[c]) / std[c]
            })
            .collect();
        Ok(Self { kind, images, labels })
    }

    pub fn kind(&self) -> DatasetKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let per = self.per_image();
        &self.images[i * per..(i + 1) * per]
    }

    fn per_image(&self) -> usize {
        self.kind.image_shape().iter().product()
    }

    /// Keeps the first `n` items.
    pub fn truncate(&mut self, n: usize) {
        if n < self.len() {
            self.labels.truncate(n);
            self.images.truncate(n * self.per_image());
        }
    }

    /// Images `[len(idx), C, H, W]` and their labels.
    pub fn batch<T: Scalar>(&self, idx: &[usize]) -> (Tensor<T>, Vec<usize>) {
        let [c, h, w] = self.kind.image_shape();
        let mut data = Vec::with_capacity(idx.len() * c * h * w);
        for &i in idx {
            data.extend(self.image(i).iter().map(|&v| T::lit(v as f64)));
        }
        let x = Tensor::new(vec![idx.len(), c, h, w], data).expect("batch shape matches data");
        (x, idx.iter().map(|&i| self.label(i)).collect())
    }
}

fn read(dir: &Path, name: &str, kind: DatasetKind, split: Split) -> Result<Vec<u8>> {
    let path = dir.join(name);
    fs::read(&path).map_err(|e| {
        Error::Data(format!(
            "cannot read {} ({e}); {kind:?} {split:?} expects {} in {} (scripts/fetch_data.sh downloads them)",
            path.display(),
            kind.files(split).join(", "),
            dir.display()
        ))
    })
}

fn be_u32(b: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(b[at..at + 4].try_into().expect("4 bytes"))
}

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

/// Parses an IDX image file into raw pixels; returns `(count, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, Vec<u8>)> {
    ensure!(bytes.len() >= 16, Length, "IDX image header needs 16 bytes, file has {}", bytes.len());
    let magic = be_u32(bytes, 0);
    ensure!(magic == IDX_IMAGES, Format, "IDX image magic {magic:#010x}, expected {IDX_IMAGES:#010x}");
    let (n, r, c) = (be_u32(bytes, 4) as usize, be_u32(bytes, 8) as usize, be_u32(bytes, 12) as usize);
    ensure!((r, c) == (28, 28), Format, "MNIST images are 28×28, file declares {r}×{c}");
    let want = 16 + n * r * c;
    ensure!(bytes.len() == want, Length, "IDX image file has {} bytes, header implies {want}", bytes.len());
    Ok((n, bytes[16..].to_vec()))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    ensure!(bytes.len() >= 8, Length, "IDX label header needs 8 bytes, file has {}", bytes.len());
    let magic = be_u32(bytes, 0);
    ensure!(magic == IDX_LABELS, Format, "IDX label magic {magic:#010x}, expected {IDX_LABELS:#010x}");
    let n = be_u32(bytes, 4) as usize;
    ensure!(bytes.len() == 8 + n, Length, "IDX label file has {} bytes, header implies {}", bytes.len(), 8 + n);
    Ok(bytes[8..].to_vec())
}

pub fn load_mnist(dir: &Path, split: Split) -> Result<Dataset> {
    let kind = DatasetKind::Mnist;
    let dir = kind.locate(dir);
    let files = kind.files(split);
    let (n, pixels) = parse_idx_images(&read(&dir, &files[0], kind, split)?)?;
    let labels = parse_idx_labels(&read(&dir, &files[1], kind, split)?)?;
    ensure!(labels.len() == n, Length, "{n} images but {} labels", labels.len());
    Dataset::from_raw(kind, &pixels, labels)
}

/// Splits CIFAR records into pixels and (fine) labels.
pub fn parse_cifar(bytes: &[u8], kind: DatasetKind) -> Result<(Vec<u8>, Vec<u8>)> {
    let label_bytes = match kind {
        DatasetKind::Cifar10 => 1,
        DatasetKind::Cifar100 => 2,
        DatasetKind::Mnist => return Err(Error::Config("MNIST is not stored as CIFAR records".into())),
    };
    let rec = label_bytes + 3072;
    ensure!(
        !bytes.is_empty() && bytes.len().is_multiple_of(rec),
        Length,
        "CIFAR file of {} bytes is not a whole number of {rec}-byte records",
        bytes.len()
    );
    let n = bytes.len() / rec;
    let mut pixels = Vec::with_capacity(n * 3072);
    let mut labels = Vec::with_capacity(n);
    for r in bytes.chunks(rec) {
        labels.push(r[label_bytes - 1]);
        pixels.extend_from_slice(&r[label_bytes..]);
    }
    Ok((pixels, labels))
}

pub fn load_cifar(dir: &Path, kind: DatasetKind, split: Split) -> Result<Dataset> {
    let dir = kind.locate(dir);
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for f in kind.files(split) {
        let (p, l) = parse_cifar(&read(&dir, &f, kind, split)?, kind)?;
        pixels.extend(p);
        labels.extend(l);
    }
    Dataset::from_raw(kind, &pixels, labels)
}

pub fn load(kind: DatasetKind, dir: &Path, split: Split) -> Result<Dataset> {
    match kind {
        DatasetKind::Mnist => load_mnist(dir, split),
        _ => load_cifar(dir, kind, split),
    }
}
