//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian:
//! `b"KACV"`, `u32` version, `u64` JSON length, JSON metadata, `u64` record
//! count, then per record: `u32` name length, name bytes, `u8` dtype code,
//! `u32` rank, `u64` per dimension, raw element payload.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::AdamW;
use super::trainer::TrainConfig;
use crate::error::{ensure, Error, Result};
use crate::network::Network;
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"KACV";
pub const VERSION: u32 = 1;

/// Everything except tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: TrainConfig,
    /// Completed epochs.
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub payload: Vec<u8>,
}

impl Record {
    pub fn from_tensor<T: Scalar>(name: String, t: &Tensor<T>) -> Self {
        let mut payload = Vec::with_capacity(t.len() * T::DTYPE.size());
        for &v in t.data() {
            v.write_le(&mut payload);
        }
        Self { name, dtype: T::DTYPE, shape: t.shape().to_vec(), payload }
    }

    /// Decodes the payload, converting to `T` if it was stored differently.
    pub fn tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        let data: Vec<T> = match self.dtype {
            DType::F64 => self.payload.chunks(8).map(|b| T::lit(f64::read_le(b))).collect(),
            DType::F32 => self.payload.chunks(4).map(|b| T::lit(f32::read_le(b) as f64)).collect(),
        };
        Tensor::new(self.shape.clone(), data)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub records: Vec<Record>,
}

impl Checkpoint {
    /// Parameters, running statistics and optimizer moments of a run.
    pub fn capture<T: Scalar>(meta: CheckpointMeta, net: &Network<T>, opt: &AdamW<T>) -> Self {
        let mut records = Vec::new();
        let params = net.params();
        for p in &params {
            records.push(Record::from_tensor(format!("param/{}", p.name), p.tensor));
        }
        for (name, t) in net.buffers() {
            records.push(Record::from_tensor(format!("buffer/{name}"), t));
        }
        for (p, (m, v)) in params.iter().zip(opt.m.iter().zip(&opt.v)) {
            records.push(Record::from_tensor(format!("adam.m/{}", p.name), m));
            records.push(Record::from_tensor(format!("adam.v/{}", p.name), v));
        }
        let mut meta = meta;
        meta.config.precision = T::DTYPE;
        Self { meta, records }
    }

    /// Rebuilds the network and optimizer state.
    pub fn restore<T: Scalar>(&self) -> Result<(Network<T>, AdamW<T>)> {
        let mut net = Network::build(&self.meta.config.network, 0)?.cast::<T>();
        let by_name: HashMap<&str, &Record> = self.records.iter().map(|r| (r.name.as_str(), r)).collect();
        let fetch = |name: String, like: &Tensor<T>| -> Result<Tensor<T>> {
            let r = by_name.get(name.as_str()).ok_or_else(|| Error::Format(format!("checkpoint lacks tensor `{name}`")))?;
            let t = r.tensor::<T>()?;
            ensure!(t.shape() == like.shape(), Format, "`{name}` has shape {:?}, network expects {:?}", t.shape(), like.shape());
            Ok(t)
        };
        let names: Vec<String> = net.params().iter().map(|p| p.name.clone()).collect();
        let bnames: Vec<String> = net.buffers().into_iter().map(|(n, _)| n).collect();
        let mut m = Vec::with_capacity(names.len());
        let mut v = Vec::with_capacity(names.len());
        for (name, p) in names.iter().zip(net.params_mut()) {
            *p = fetch(format!("param/{name}"), p)?;
            m.push(fetch(format!("adam.m/{name}"), p)?);
            v.push(fetch(format!("adam.v/{name}"), p)?);
        }
        for (name, b) in bnames.iter().zip(net.buffers_mut()) {
            *b = fetch(format!("buffer/{name}"), b)?;
        }
        let expected = 3 * names.len() + bnames.len();
        ensure!(self.records.len() == expected, Format, "checkpoint has {} tensors, network needs {expected}", self.records.len());
        let opt = AdamW { cfg: self.meta.config.optimizer, step: self.meta.step as u64, m, v };
        Ok((net, opt))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let json = serde_json::to_vec(&self.meta)?;
        let mut out = Vec::with_capacity(64 + json.len() + self.records.iter().map(|r| r.payload.len() + 64).sum::<usize>());
        out.extend(MAGIC);
        out.extend(VERSION.to_le_bytes());
        out.extend((json.len() as u64).to_le_bytes());
        out.extend(&json);
        out.extend((self.records.len() as u64).to_le_bytes());
        for r in &self.records {
            out.extend((r.name.len() as u32).to_le_bytes());
            out.extend(r.name.as_bytes());
            out.push(r.dtype.code());
            out.extend((r.shape.len() as u32).to_le_bytes());
            for &d in &r.shape {
                out.extend((d as u64).to_le_bytes());
            }
            out.extend(&r.payload);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, at: 0 };
        ensure!(cur.take(4)? == MAGIC, Format, "not a checkpoint (bad magic)");
        let version = cur.u32()?;
        if version != VERSION {
            return Err(Error::UnsupportedVersion { found: version, expected: VERSION });
        }
        let len = cur.u64()? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(cur.take(len)?)?;
        let count = cur.u64()? as usize;
        let mut records = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let nl = cur.u32()? as usize;
            let name = String::from_utf8(cur.take(nl)?.to_vec()).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let code = cur.take(1)?[0];
            let dtype = DType::from_code(code).ok_or_else(|| Error::Format(format!("unknown dtype code {code} for `{name}`")))?;
            let rank = cur.u32()? as usize;
            let shape = (0..rank).map(|_| cur.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let payload = cur.take(n * dtype.size())?.to_vec();
            records.push(Record { name, dtype, shape, payload });
        }
        ensure!(cur.at == bytes.len(), Length, "{} trailing bytes after the last record", bytes.len() - cur.at);
        Ok(Self { meta, records })
    }

    /// Writes to a temporary sibling and renames it into place, so an
    /// interrupted save never clobbers the previous checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        ensure!(
            self.bytes.len() - self.at >= n,
            Length,
            "checkpoint truncated: needed {n} bytes at offset {}, {} left",
            self.at,
            self.bytes.len() - self.at
        );
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn checkpoint_save(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    ckpt.save(path)
}

pub fn checkpoint_load(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path)
}
