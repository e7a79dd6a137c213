//! The experiment config file: one TOML document drives every stage.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use waypoint_core::decoder::DecoderConfig;
use waypoint_core::embed::EncoderConfig;
use waypoint_core::env::{DatasetConfig, EnvConfig};
use waypoint_core::math;
use waypoint_core::train::{FinetuneConfig, PretrainConfig};

use crate::error::{Error, Result};

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub data_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub report_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self { data_dir: "data".into(), checkpoint_dir: "checkpoints".into(), report_dir: "reports".into() }
    }
}

impl Paths {
    /// Resolve relative directories against `root`.
    pub fn under(&self, root: &Path) -> Paths {
        let j = |p: &PathBuf| if p.is_absolute() { p.clone() } else { root.join(p) };
        Paths { data_dir: j(&self.data_dir), checkpoint_dir: j(&self.checkpoint_dir), report_dir: j(&self.report_dir) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Model initialisation, batching, dropout and rollouts. The per-stage
    /// `seed` fields are overwritten with this value.
    pub seed: u64,
    /// Worlds and episode sampling.
    pub data_seed: u64,
    pub env: EnvConfig,
    pub dataset: DatasetConfig,
    pub embed: EncoderConfig,
    pub decoder: DecoderConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub paths: Paths,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data_seed: 0,
            env: EnvConfig::default(),
            dataset: DatasetConfig::default(),
            embed: EncoderConfig::default(),
            decoder: DecoderConfig::default(),
            pretrain: PretrainConfig::default(),
            finetune: FinetuneConfig::default(),
            paths: Paths::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.resolved()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {}", path.display(), m)),
            e => e,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn with_seed(mut self, seed: u64) -> Result<Self> {
        self.seed = seed;
        self.resolved()
    }

    /// Propagate the top-level seed and validate every section.
    pub fn resolved(mut self) -> Result<Self> {
        self.pretrain.seed = self.seed;
        self.finetune.seed = self.seed;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |r: waypoint_core::Result<()>| r.map_err(|e| Error::Config(e.to_string()));
        wrap(self.env.validate())?;
        wrap(self.decoder.validate())?;
        wrap(self.pretrain.validate())?;
        wrap(self.finetune.validate())?;
        if self.embed.d_enc == 0 {
            return Err(Error::Config("embed.d_enc must be positive".into()));
        }
        if self.decoder.max_timesteps < self.env.step_budget {
            return Err(Error::Config(format!(
                "decoder.max_timesteps {} is shorter than env.step_budget {}",
                self.decoder.max_timesteps, self.env.step_budget
            )));
        }
        let d = &self.dataset;
        if d.n_train_graphs == 0 || d.n_unseen_graphs == 0 {
            return Err(Error::Config("dataset needs at least one train and one unseen graph".into()));
        }
        if d.min_hops == 0 || d.min_hops > d.max_hops {
            return Err(Error::Config(format!("dataset hop range {}..={} is empty", d.min_hops, d.max_hops)));
        }
        Ok(())
    }

    pub fn n_graphs(&self) -> usize {
        self.dataset.n_train_graphs + self.dataset.n_unseen_graphs
    }

    /// FNV-1a over the canonical JSON form.
    pub fn hash(&self) -> u64 {
        math::fnv1a(serde_json::to_string(self).expect("config serializes").into_bytes())
    }

    /// Hash of the sections that determine the data and the model shape;
    /// a checkpoint can only be used with a config that agrees on these.
    pub fn model_hash(&self) -> u64 {
        let key = (&self.data_seed, &self.env, &self.dataset, &self.embed, &self.decoder);
        math::fnv1a(serde_json::to_string(&key).expect("config serializes").into_bytes())
    }

    /// Hash of the sections that determine the dataset files.
    pub fn data_hash(&self) -> u64 {
        let key = (&self.data_seed, &self.env, &self.dataset);
        math::fnv1a(serde_json::to_string(&key).expect("config serializes").into_bytes())
    }
}

pub fn hex(h: u64) -> String {
    format!("{:016x}", h)
}
