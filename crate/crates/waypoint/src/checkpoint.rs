//! Versioned binary checkpoints.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic "WAYPTCKP" | u32 version | u64 config hash | u64 model hash
//! u64 n | n bytes of JSON metadata (stage, iteration, config, curves)
//! u32 n_tensors, then per tensor:
//!     u32 name_len | name | u8 dtype (1 = f64) | u32 ndim | u64 dims.. | values
//! u64 optimizer step, then per tensor: first moments | second moments
//! u8 has_finetune_state, then when 1:
//!     u64 iteration | f64 lambda | f64 target | f64 lr | u64 capacity
//!     u64 n | n bytes of JSON replay items
//! u64 FNV-1a of everything above
//! ```
//!
//! Floats are stored by bit pattern, so save -> load -> save is byte-identical.

use std::path::Path;

use serde::{Deserialize, Serialize};
use waypoint_core::env::Trajectory;
use waypoint_core::math;
use waypoint_core::tensor::{OptimizerState, ParameterStore, Tensor};
use waypoint_core::train::{EntropyState, FinetunePoint, FinetuneState, PretrainPoint, ReplayBuffer};

use crate::config::{ExperimentConfig, CODE_VERSION};
use crate::error::{Error, Result};
use crate::io::write_bytes;

pub const MAGIC: &[u8; 8] = b"WAYPTCKP";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Finetune,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub stage: Stage,
    /// "PT", "PT+FT" or "FT-only".
    pub label: String,
    /// Optimizer steps taken in `stage`.
    pub iteration: usize,
    pub seed: u64,
    pub version: String,
    pub config: ExperimentConfig,
    pub pretrain_curve: Vec<PretrainPoint>,
    pub finetune_curve: Vec<FinetunePoint>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub store: ParameterStore,
    pub finetune: Option<FinetuneState>,
}

impl Checkpoint {
    pub fn new(stage: Stage, label: &str, iteration: usize, config: &ExperimentConfig, store: ParameterStore) -> Self {
        Self {
            meta: CheckpointMeta {
                stage,
                label: label.into(),
                iteration,
                seed: config.seed,
                version: CODE_VERSION.into(),
                config: config.clone(),
                pretrain_curve: Vec::new(),
                finetune_curve: Vec::new(),
            },
            store,
            finetune: None,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(MAGIC);
        put_u32(&mut w, FORMAT_VERSION);
        put_u64(&mut w, self.meta.config.hash());
        put_u64(&mut w, self.meta.config.model_hash());
        put_blob(&mut w, serde_json::to_vec(&self.meta).expect("meta serializes"));

        put_u32(&mut w, self.store.len() as u32);
        for (name, t) in self.store.iter() {
            put_u32(&mut w, name.len() as u32);
            w.extend_from_slice(name.as_bytes());
            w.push(DTYPE_F64);
            put_u32(&mut w, t.shape.len() as u32);
            t.shape.iter().for_each(|d| put_u64(&mut w, *d as u64));
            t.values.iter().for_each(|v| put_f64(&mut w, *v));
        }
        let opt = self.store.optimizer_state();
        put_u64(&mut w, opt.step);
        for (m, v) in opt.first_moments.iter().zip(&opt.second_moments) {
            m.iter().chain(v).for_each(|x| put_f64(&mut w, *x));
        }

        match &self.finetune {
            None => w.push(0),
            Some(s) => {
                w.push(1);
                put_u64(&mut w, s.iteration as u64);
                put_f64(&mut w, s.entropy.lambda);
                put_f64(&mut w, s.entropy.target);
                put_f64(&mut w, s.entropy.lr);
                put_u64(&mut w, s.replay.capacity() as u64);
                put_blob(&mut w, serde_json::to_vec(s.replay.items()).expect("trajectories serialize"));
            }
        }
        let sum = math::fnv1a(w.iter().copied());
        put_u64(&mut w, sum);
        w
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        if bytes.len() < 8 {
            return Err("file too short".into());
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        if math::fnv1a(body.iter().copied()).to_le_bytes() != tail {
            return Err("checksum mismatch (truncated or corrupted file)".into());
        }
        let mut r = Reader { buf: body, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err("not a checkpoint (bad magic)".into());
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(format!("unsupported format version {}", version));
        }
        let config_hash = r.u64()?;
        let model_hash = r.u64()?;
        let meta: CheckpointMeta = serde_json::from_slice(r.blob()?).map_err(|e| format!("metadata: {}", e))?;
        if meta.config.hash() != config_hash || meta.config.model_hash() != model_hash {
            return Err("header hashes disagree with the embedded config".into());
        }

        let mut store = ParameterStore::new();
        let n = r.u32()? as usize;
        for _ in 0..n {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?).map_err(|_| "tensor name is not UTF-8")?.to_owned();
            if r.u8()? != DTYPE_F64 {
                return Err(format!("tensor {}: unknown dtype", name));
            }
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
            let numel = shape.iter().try_fold(1usize, |a, d| a.checked_mul(*d)).ok_or("tensor shape overflows")?;
            let values = r.f64s(numel)?;
            let t = Tensor::new(shape, values).map_err(|e| format!("tensor {}: {}", name, e))?;
            store.add(&name, t).map_err(|e| e.to_string())?;
        }
        let step = r.u64()?;
        let (mut first, mut second) = (Vec::new(), Vec::new());
        for (_, t) in store.iter() {
            first.push(r.f64s(t.numel())?);
            second.push(r.f64s(t.numel())?);
        }
        store
            .set_optimizer_state(OptimizerState { step, first_moments: first, second_moments: second })
            .map_err(|e| e.to_string())?;

        let finetune = match r.u8()? {
            0 => None,
            1 => {
                let iteration = r.u64()? as usize;
                let entropy = EntropyState { lambda: r.f64()?, target: r.f64()?, lr: r.f64()? };
                let capacity = r.u64()? as usize;
                let items: Vec<Trajectory> = serde_json::from_slice(r.blob()?).map_err(|e| format!("replay: {}", e))?;
                if items.len() > capacity {
                    return Err("replay buffer holds more items than its capacity".into());
                }
                let replay = ReplayBuffer::from_items(capacity, items).map_err(|e| e.to_string())?;
                Some(FinetuneState { iteration, entropy, replay })
            }
            t => return Err(format!("bad fine-tune state tag {}", t)),
        };
        if r.pos != body.len() {
            return Err("trailing bytes".into());
        }
        Ok(Self { meta, store, finetune })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_bytes(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(Error::io(path))?;
        Self::from_bytes(&bytes).map_err(|reason| Error::Checkpoint { path: path.into(), reason })
    }

    /// Reject checkpoints whose data or model shape differs from `cfg`.
    pub fn check_compatible(&self, cfg: &ExperimentConfig, path: &Path) -> Result<()> {
        if self.meta.config.model_hash() != cfg.model_hash() {
            return Err(Error::Config(format!(
                "{} was written under a different data/model config (hash mismatch)",
                path.display()
            )));
        }
        Ok(())
    }
}

fn put_u32(w: &mut Vec<u8>, v: u32) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(w: &mut Vec<u8>, v: u64) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(w: &mut Vec<u8>, v: f64) {
    w.extend_from_slice(&v.to_bits().to_le_bytes());
}

fn put_blob(w: &mut Vec<u8>, b: Vec<u8>) {
    put_u64(w, b.len() as u64);
    w.extend_from_slice(&b);
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.buf.len()).ok_or("unexpected end of file")?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> std::result::Result<u8, String> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> std::result::Result<f64, String> {
        Ok(f64::from_bits(self.u64()?))
    }

    fn f64s(&mut self, n: usize) -> std::result::Result<Vec<f64>, String> {
        let bytes = self.take(n.checked_mul(8).ok_or("length overflows")?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().unwrap()))).collect())
    }

    fn blob(&mut self) -> std::result::Result<&'a [u8], String> {
        let n = self.u64()? as usize;
        self.take(n)
    }
}
