//! Offline pre-training on expert trajectories and online fine-tuning with
//! an entropy constraint.

mod online;
mod pretrain;
mod replay;

use alloc::vec::Vec;

use crate::decoder::{Decoder, DecoderConfig};
use crate::embed::{EncodedTrajectory, EncoderConfig, Encoders};
use crate::env::{Dataset, Split, Trajectory, Vocabulary};
use crate::error::Result;
use crate::tensor::ParameterStore;

pub use online::{
    evaluate, expert_report, finetune, policy_entropy, random_policy_report, random_rollout, rollout, EntropyState,
    FinetuneConfig, FinetunePoint, FinetuneState,
};
pub use pretrain::{pretrain, sap_accuracy, sap_loss, PretrainConfig, PretrainPoint, SapAccuracy};
pub use replay::ReplayBuffer;

/// Frozen encoders plus the trainable decoder and its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Agent {
    pub encoders: Encoders,
    pub decoder: Decoder,
    pub store: ParameterStore,
}

impl Agent {
    pub fn new(enc: EncoderConfig, dec: DecoderConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        let encoders = Encoders::new(enc, vocab)?;
        let mut store = ParameterStore::new();
        let decoder = Decoder::new(dec, enc.d_enc, &mut store, seed)?;
        Ok(Self { encoders, decoder, store })
    }

    /// Rebuild around an existing parameter store.
    pub fn from_store(enc: EncoderConfig, dec: DecoderConfig, vocab: Vocabulary, store: ParameterStore) -> Result<Self> {
        let encoders = Encoders::new(enc, vocab)?;
        let decoder = Decoder::from_store(dec, &store)?;
        Ok(Self { encoders, decoder, store })
    }

    pub fn encode(&self, trajs: &[Trajectory]) -> Result<Vec<EncodedTrajectory>> {
        trajs.iter().map(|t| self.encoders.encode_trajectory(t)).collect()
    }
}

/// A dataset with every trajectory encoded once.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedDataset {
    pub train: Vec<EncodedTrajectory>,
    pub val_seen: Vec<EncodedTrajectory>,
    pub val_unseen: Vec<EncodedTrajectory>,
}

impl EncodedDataset {
    pub fn new(agent: &Agent, ds: &Dataset) -> Result<Self> {
        Ok(Self { train: agent.encode(&ds.train)?, val_seen: agent.encode(&ds.val_seen)?, val_unseen: agent.encode(&ds.val_unseen)? })
    }

    pub fn split(&self, s: Split) -> &[EncodedTrajectory] {
        match s {
            Split::Train => &self.train,
            Split::ValSeen => &self.val_seen,
            Split::ValUnseen => &self.val_unseen,
        }
    }
}
