use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::LN_2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Agent, ReplayBuffer};
use crate::decoder::{sample_action, SampleMode};
use crate::embed::{EncodedStep, EncodedTrajectory};
use crate::env::{expert_trajectory, run_episode, Dataset, EnvConfig, EpisodeSpec, NavGraph, Trajectory};
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::rng::{self, StreamRng};
use crate::tensor::{AdamConfig, Segment, Tape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub replay_capacity: usize,
    pub rollouts_per_iteration: usize,
    /// Target policy entropy β in nats.
    pub target_entropy: f64,
    pub entropy_lr: f64,
    pub lambda_init: f64,
    /// Rollouts are conditioned on this multiple of the largest training return.
    pub target_return_scale: f64,
    /// Sampling temperature for exploration rollouts.
    pub temperature: f64,
    pub grad_clip: f64,
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            iterations: 1000,
            learning_rate: 1e-5,
            batch_size: 8,
            replay_capacity: 256,
            rollouts_per_iteration: 1,
            target_entropy: LN_2,
            entropy_lr: 0.01,
            lambda_init: 0.0,
            target_return_scale: 1.0,
            temperature: 1.0,
            grad_clip: 1.0,
            eval_every: 250,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    /// A learning rate of zero is allowed and freezes the policy.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.iterations == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return bad("iterations, batch_size and eval_every must be positive");
        }
        if self.replay_capacity < self.batch_size {
            return bad("replay_capacity must be at least batch_size");
        }
        if !(self.target_entropy >= 0.0) || !(self.entropy_lr >= 0.0) || !(self.lambda_init >= 0.0) {
            return bad("target_entropy, entropy_lr and lambda_init must be non-negative");
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return bad("learning_rate must be non-negative");
        }
        if !(self.temperature > 0.0) || !(self.grad_clip > 0.0) || !self.target_return_scale.is_finite() {
            return bad("temperature and grad_clip must be positive, target_return_scale finite");
        }
        Ok(())
    }
}

/// Lagrange multiplier for the constraint `H ≥ β`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntropyState {
    pub lambda: f64,
    pub target: f64,
    pub lr: f64,
}

impl EntropyState {
    pub fn new(lambda: f64, target: f64, lr: f64) -> Self {
        Self { lambda: lambda.max(0.0), target, lr }
    }

    /// Dual ascent on `λ (β - H)`, projected onto `λ ≥ 0`.
    pub fn update(&mut self, entropy: f64) -> f64 {
        self.lambda = (self.lambda + self.lr * (self.target - entropy)).max(0.0);
        self.lambda
    }
}

/// Roll out the agent from `spec.start`, conditioning the first step on
/// `target_return` and every later step on what is left after the rewards
/// received so far. The stored trajectory carries the returns actually
/// obtained.
#[allow(clippy::too_many_arguments)]
pub fn rollout(
    agent: &Agent,
    graph: &NavGraph,
    env: &EnvConfig,
    spec: &EpisodeSpec,
    target_return: f64,
    mode: SampleMode,
    temperature: f64,
    r: &mut StreamRng,
) -> Result<Trajectory> {
    if !target_return.is_finite() {
        return Err(Error::NonFinite { op: "rollout target return" });
    }
    let x = agent.encoders.embed_instruction(&spec.instruction)?;
    let mut prefix = EncodedTrajectory { instruction: x.0.clone(), steps: Vec::new() };
    let mut rtg = target_return;
    run_episode(graph, env, spec, |obs, hist| {
        if let (Some(last), Some(step)) = (hist.last(), prefix.steps.last_mut()) {
            rtg -= last.reward;
            step.action = Some(last.action);
        }
        let step: EncodedStep = agent.encoders.encode_step(&x, obs, rtg, hist.len(), None)?;
        prefix.steps.push(step);
        let d = agent.decoder.next_action_distribution(&agent.store, &prefix)?;
        sample_action(&d, temperature, mode, r)
    })
}

/// Uniformly random actions; the baseline an untrained policy is compared to.
pub fn random_rollout(graph: &NavGraph, env: &EnvConfig, spec: &EpisodeSpec, r: &mut StreamRng) -> Result<Trajectory> {
    run_episode(graph, env, spec, |obs, _| Ok(r.gen_range(0..obs.n_actions())))
}

/// `(1/n) Σ_i (1/T_i) Σ_t H[π(·|prefix_t)]` from teacher-forced distributions.
pub fn policy_entropy(agent: &Agent, batch: &[&EncodedTrajectory]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Empty("entropy batch"));
    }
    let dists = agent.decoder.distributions(&agent.store, batch)?;
    let total: f64 = dists.iter().map(|d| d.iter().map(|x| x.entropy()).sum::<f64>() / d.len() as f64).sum();
    Ok(total / batch.len() as f64)
}

fn graph_of<'a>(graphs: &'a [NavGraph], id: u32) -> Result<&'a NavGraph> {
    graphs.iter().find(|g| g.id() == id).ok_or(Error::InvalidConfig(format!("no graph {}", id)))
}

/// One greedy rollout per episode.
pub fn evaluate(agent: &Agent, graphs: &[NavGraph], episodes: &[EpisodeSpec], env: &EnvConfig, target_return: f64) -> Result<MetricsReport> {
    if episodes.is_empty() {
        return Err(Error::Empty("episode set"));
    }
    let mut r = rng::stream(0, &[rng::label("evaluate")]);
    let trajs = episodes
        .iter()
        .map(|e| rollout(agent, graph_of(graphs, e.graph_id)?, env, e, target_return, SampleMode::Greedy, 1.0, &mut r))
        .collect::<Result<Vec<_>>>()?;
    MetricsReport::from_trajectories(&trajs, |id| graph_of(graphs, id), env.success_threshold)
}

pub fn random_policy_report(graphs: &[NavGraph], episodes: &[EpisodeSpec], env: &EnvConfig, seed: u64) -> Result<MetricsReport> {
    let trajs = episodes
        .iter()
        .map(|e| {
            let mut r = rng::stream(seed, &[rng::label("random-policy"), e.id as u64]);
            random_rollout(graph_of(graphs, e.graph_id)?, env, e, &mut r)
        })
        .collect::<Result<Vec<_>>>()?;
    MetricsReport::from_trajectories(&trajs, |id| graph_of(graphs, id), env.success_threshold)
}

/// Replays the expert; an upper bound on every metric.
pub fn expert_report(graphs: &[NavGraph], episodes: &[EpisodeSpec], env: &EnvConfig) -> Result<MetricsReport> {
    let trajs = episodes
        .iter()
        .map(|e| expert_trajectory(graph_of(graphs, e.graph_id)?, env, e))
        .collect::<Result<Vec<_>>>()?;
    MetricsReport::from_trajectories(&trajs, |id| graph_of(graphs, id), env.success_threshold)
}

/// Everything besides the parameters that a resumed run needs.
#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneState {
    /// Optimizer steps taken so far.
    pub iteration: usize,
    pub entropy: EntropyState,
    pub replay: ReplayBuffer,
}

impl FinetuneState {
    pub fn new(cfg: &FinetuneConfig) -> Result<Self> {
        Ok(Self {
            iteration: 0,
            entropy: EntropyState::new(cfg.lambda_init, cfg.target_entropy, cfg.entropy_lr),
            replay: ReplayBuffer::new(cfg.replay_capacity)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetunePoint {
    pub iteration: usize,
    /// Means since the previous point.
    pub loss: f64,
    pub entropy: f64,
    pub lambda: f64,
    pub replay_mean_return: f64,
    pub val_seen: MetricsReport,
    pub val_unseen: MetricsReport,
}

/// `(NLL per step, H, loss)` on one batch, leaving gradients in the store.
fn finetune_step(agent: &mut Agent, batch: &[&EncodedTrajectory], lambda: f64, r: &mut StreamRng) -> Result<(f64, f64, f64)> {
    let mut tape = Tape::with_store(&agent.store);
    let b = agent.decoder.batch_logits(&mut tape, batch, false, Some(r))?;
    let targets: Vec<usize> = b
        .targets
        .iter()
        .map(|a| a.ok_or(Error::MalformedTrajectory("missing action".into())))
        .collect::<Result<_>>()?;
    let ce = tape.cross_entropy_with_logits(b.logits, &b.segments, &targets)?;
    let nll = tape.scale(ce, 1.0 / targets.len() as f64)?;

    let n_rows = tape.shape(b.logits)[0];
    let mut weights = vec![0.0; n_rows];
    let n = batch.len() as f64;
    for (seg, (ti, _)) in b.segments.iter().zip(&b.owners) {
        let w = -1.0 / (batch[*ti].steps.len() as f64 * n);
        weights[seg.start..seg.start + seg.len].iter_mut().for_each(|x| *x = w);
    }
    let segs: Vec<Segment> = b.segments.clone();
    let logp = tape.log_softmax_segments(b.logits, &segs)?;
    let p = tape.exp(logp)?;
    let plogp = tape.mul(p, logp)?;
    let w = tape.constant(vec![n_rows, 1], weights)?;
    let h = tape.mul(plogp, w)?;
    let h = tape.sum(h)?;
    let entropy = tape.scalar(h);
    let nll_value = tape.scalar(nll);
    let loss = if lambda > 0.0 {
        let pen = tape.scale(h, -lambda)?;
        tape.add(nll, pen)?
    } else {
        nll
    };
    let loss_value = tape.scalar(loss);
    let grads = tape.backward(loss)?;
    agent.store.accumulate(&grads);
    Ok((nll_value, entropy, loss_value))
}

/// Online fine-tuning until `state.iteration == until`. The replay buffer is
/// filled with sampled rollouts on training episodes before the first
/// optimizer step. Each iteration then adds `rollouts_per_iteration`
/// sampled rollouts, takes one step on `NLL - λ H` over a uniformly drawn
/// batch, and moves λ by dual ascent. All randomness depends only on
/// `(seed, iteration)`, so a run restored from `state` continues exactly.
pub fn finetune(
    agent: &mut Agent,
    ds: &Dataset,
    env: &EnvConfig,
    cfg: &FinetuneConfig,
    state: &mut FinetuneState,
    until: usize,
    mut on_eval: impl FnMut(&FinetunePoint, &Agent, &FinetuneState) -> Result<()>,
) -> Result<Vec<FinetunePoint>> {
    cfg.validate()?;
    if ds.train.is_empty() || ds.val_seen.is_empty() || ds.val_unseen.is_empty() {
        return Err(Error::Empty("dataset split"));
    }
    let target = cfg.target_return_scale * ds.max_train_return();
    let temperature = cfg.temperature;
    let explore = |agent: &Agent, r: &mut StreamRng| -> Result<Trajectory> {
        let spec = &ds.train[r.gen_range(0..ds.train.len())].episode;
        rollout(agent, ds.graph(spec.graph_id)?, env, spec, target, SampleMode::Sample, temperature, r)
    };
    let val_seen: Vec<EpisodeSpec> = ds.val_seen.iter().map(|t| t.episode.clone()).collect();
    let val_unseen: Vec<EpisodeSpec> = ds.val_unseen.iter().map(|t| t.episode.clone()).collect();

    let adam = AdamConfig::default();
    let mut curve = Vec::new();
    let (mut sums, mut count) = ([0.0; 2], 0usize);
    while state.iteration < until {
        let mut k = 0u64;
        while !state.replay.is_full() {
            let mut r = rng::stream(cfg.seed, &[rng::label("fill"), state.replay.len() as u64, k]);
            state.replay.insert(explore(agent, &mut r)?)?;
            k += 1;
        }
        let it = state.iteration;
        let mut r = rng::stream(cfg.seed, &[rng::label("finetune"), it as u64]);
        for _ in 0..cfg.rollouts_per_iteration {
            state.replay.insert(explore(agent, &mut r)?)?;
        }
        let items = state.replay.items();
        let picked: Vec<&Trajectory> = (0..cfg.batch_size).map(|_| &items[r.gen_range(0..items.len())]).collect();
        let encoded: Vec<EncodedTrajectory> = picked.iter().map(|t| agent.encoders.encode_trajectory(t)).collect::<Result<_>>()?;
        let refs: Vec<&EncodedTrajectory> = encoded.iter().collect();
        let (_, entropy, loss) = finetune_step(agent, &refs, state.entropy.lambda, &mut r)?;
        agent.store.clip_grad_norm(cfg.grad_clip);
        agent.store.adam_step(cfg.learning_rate, &adam)?;
        state.entropy.update(entropy);
        state.iteration += 1;
        sums[0] += loss;
        sums[1] += entropy;
        count += 1;

        if state.iteration % cfg.eval_every == 0 || state.iteration == until {
            let replay_mean_return =
                state.replay.items().iter().map(|t| t.total_return()).sum::<f64>() / state.replay.len() as f64;
            let p = FinetunePoint {
                iteration: state.iteration,
                loss: sums[0] / count as f64,
                entropy: sums[1] / count as f64,
                lambda: state.entropy.lambda,
                replay_mean_return,
                val_seen: evaluate(agent, &ds.graphs, &val_seen, env, target)?,
                val_unseen: evaluate(agent, &ds.graphs, &val_unseen, env, target)?,
            };
            sums = [0.0; 2];
            count = 0;
            on_eval(&p, agent, state)?;
            curve.push(p);
        }
    }
    Ok(curve)
}
