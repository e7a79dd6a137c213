use alloc::vec::Vec;
use core::ops::Range;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Agent, EncodedDataset};
use crate::embed::EncodedTrajectory;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{AdamConfig, Tape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub eval_every: usize,
    pub seed: u64,
    /// Global gradient-norm clip.
    pub grad_clip: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { iterations: 5000, batch_size: 64, learning_rate: 5e-5, eval_every: 250, seed: 0, grad_clip: 1.0 }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.iterations > 0
            && self.batch_size > 0
            && self.eval_every > 0
            && self.learning_rate > 0.0
            && self.learning_rate.is_finite()
            && self.grad_clip > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig("pretrain settings must all be positive".into()))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SapAccuracy {
    pub correct: usize,
    pub total: usize,
}

impl SapAccuracy {
    pub fn percent(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            100.0 * self.correct as f64 / self.total as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainPoint {
    /// Optimizer steps taken so far.
    pub iteration: usize,
    /// Mean per-step training loss since the previous point.
    pub loss: f64,
    pub val_seen: SapAccuracy,
    pub val_unseen: SapAccuracy,
}

const EVAL_CHUNK: usize = 32;

/// Summed negative log-likelihood of the recorded actions.
pub fn sap_loss(agent: &Agent, trajs: &[&EncodedTrajectory]) -> Result<f64> {
    let mut tape = Tape::with_store(&agent.store);
    let b = agent.decoder.batch_logits(&mut tape, trajs, false, None)?;
    let targets = targets(&b.targets)?;
    let ce = tape.cross_entropy_with_logits(b.logits, &b.segments, &targets)?;
    Ok(tape.scalar(ce))
}

fn targets(t: &[Option<usize>]) -> Result<Vec<usize>> {
    t.iter().map(|a| a.ok_or(Error::MalformedTrajectory("missing action".into()))).collect()
}

/// Teacher-forced accuracy: the fraction of steps whose argmax matches the
/// recorded action.
pub fn sap_accuracy(agent: &Agent, trajs: &[EncodedTrajectory]) -> Result<SapAccuracy> {
    let mut acc = SapAccuracy::default();
    for chunk in trajs.chunks(EVAL_CHUNK) {
        let refs: Vec<&EncodedTrajectory> = chunk.iter().collect();
        for (tr, dists) in chunk.iter().zip(agent.decoder.distributions(&agent.store, &refs)?) {
            for (s, d) in tr.steps.iter().zip(dists) {
                acc.total += 1;
                if Some(d.argmax()) == s.action {
                    acc.correct += 1;
                }
            }
        }
    }
    Ok(acc)
}

/// Minibatch SAP training for the iterations in `range`; `range.start` lets a
/// run resume from a checkpoint. Batches and dropout masks depend only on
/// `(seed, iteration)`. `on_eval` sees each evaluation point together with
/// the agent at that moment.
pub fn pretrain(
    agent: &mut Agent,
    data: &EncodedDataset,
    cfg: &PretrainConfig,
    range: Range<usize>,
    mut on_eval: impl FnMut(&PretrainPoint, &Agent) -> Result<()>,
) -> Result<Vec<PretrainPoint>> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let adam = AdamConfig::default();
    let mut curve = Vec::new();
    let (mut loss_sum, mut loss_n) = (0.0, 0usize);
    for it in range {
        let mut r = rng::stream(cfg.seed, &[rng::label("pretrain"), it as u64]);
        let batch: Vec<&EncodedTrajectory> =
            (0..cfg.batch_size).map(|_| &data.train[r.gen_range(0..data.train.len())]).collect();
        let mut tape = Tape::with_store(&agent.store);
        let b = agent.decoder.batch_logits(&mut tape, &batch, false, Some(&mut r))?;
        let targets = targets(&b.targets)?;
        let ce = tape.cross_entropy_with_logits(b.logits, &b.segments, &targets)?;
        let loss = tape.scale(ce, 1.0 / targets.len() as f64)?;
        loss_sum += tape.scalar(loss);
        loss_n += 1;
        let grads = tape.backward(loss)?;
        agent.store.accumulate(&grads);
        agent.store.clip_grad_norm(cfg.grad_clip);
        agent.store.adam_step(cfg.learning_rate, &adam)?;

        let done = it + 1;
        if done % cfg.eval_every == 0 || done == cfg.iterations {
            let p = PretrainPoint {
                iteration: done,
                loss: loss_sum / loss_n as f64,
                val_seen: sap_accuracy(agent, &data.val_seen)?,
                val_unseen: sap_accuracy(agent, &data.val_unseen)?,
            };
            loss_sum = 0.0;
            loss_n = 0;
            on_eval(&p, agent)?;
            curve.push(p);
        }
    }
    Ok(curve)
}
