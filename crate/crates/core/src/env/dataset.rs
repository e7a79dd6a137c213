//! Expert datasets with train / val-seen / val-unseen splits.

use alloc::format;
use alloc::vec::Vec;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::instruction::{generate_instruction, Vocabulary};
use super::path::{distances_from, path_along};
use super::sim::{expert_trajectory, EnvConfig, EpisodeSpec, Trajectory};
use super::world::{generate_world, NavGraph, ViewpointId};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    ValSeen,
    ValUnseen,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::ValSeen, Split::ValUnseen];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::ValSeen => "val_seen",
            Split::ValUnseen => "val_unseen",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub n_train_graphs: usize,
    pub n_unseen_graphs: usize,
    pub train_episodes_per_graph: usize,
    pub val_seen_episodes_per_graph: usize,
    pub unseen_episodes_per_graph: usize,
    pub min_hops: usize,
    pub max_hops: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_train_graphs: 8,
            n_unseen_graphs: 2,
            train_episodes_per_graph: 60,
            val_seen_episodes_per_graph: 15,
            unseen_episodes_per_graph: 30,
            min_hops: 2,
            max_hops: 6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub graphs: Vec<NavGraph>,
    pub train: Vec<Trajectory>,
    pub val_seen: Vec<Trajectory>,
    pub val_unseen: Vec<Trajectory>,
}

impl Dataset {
    pub fn split(&self, s: Split) -> &[Trajectory] {
        match s {
            Split::Train => &self.train,
            Split::ValSeen => &self.val_seen,
            Split::ValUnseen => &self.val_unseen,
        }
    }

    pub fn graph(&self, id: u32) -> Result<&NavGraph> {
        self.graphs.iter().find(|g| g.id() == id).ok_or(Error::InvalidConfig(format!("no graph {}", id)))
    }

    /// Largest expert return among training trajectories.
    pub fn max_train_return(&self) -> f64 {
        self.train.iter().map(|t| t.total_return()).fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Generate `n` worlds with ids `0..n`.
pub fn generate_worlds(env: &EnvConfig, n: usize, seed: u64) -> Result<Vec<NavGraph>> {
    (0..n as u32).map(|i| generate_world(i, seed, &env.world)).collect()
}

/// Start/goal pairs whose expert path has an admissible hop count and whose
/// goal is not already within the success threshold of the start.
fn candidate_pairs(graph: &NavGraph, env: &EnvConfig, cfg: &DatasetConfig) -> Result<Vec<(ViewpointId, ViewpointId, Vec<ViewpointId>, f64)>> {
    let mut out = Vec::new();
    for g in 0..graph.len() as u32 {
        let goal = ViewpointId(g);
        let to_goal = distances_from(graph, goal)?;
        for s in 0..graph.len() as u32 {
            let start = ViewpointId(s);
            if start == goal || to_goal[s as usize] <= env.success_threshold {
                continue;
            }
            let (path, len) = path_along(graph, start, goal, &to_goal)?;
            let hops = path.len() - 1;
            if hops >= cfg.min_hops && hops <= cfg.max_hops && path.len() <= env.step_budget {
                out.push((start, goal, path, len));
            }
        }
    }
    Ok(out)
}

/// Sample episodes and expert trajectories. The last `n_unseen_graphs`
/// graphs form the unseen split; train and val-seen share the others but
/// never share a start/goal pair.
pub fn make_dataset(graphs: Vec<NavGraph>, env: &EnvConfig, cfg: &DatasetConfig, seed: u64) -> Result<Dataset> {
    env.validate()?;
    if graphs.len() < 2 || cfg.n_unseen_graphs == 0 || cfg.n_unseen_graphs >= graphs.len() {
        return Err(Error::InsufficientGraphs(graphs.len()));
    }
    if cfg.min_hops == 0 || cfg.min_hops > cfg.max_hops {
        return Err(Error::InvalidConfig(format!("hop range {}..={} is empty", cfg.min_hops, cfg.max_hops)));
    }
    let vocab = Vocabulary::new(env.world.n_landmarks);
    let n_seen = graphs.len() - cfg.n_unseen_graphs;
    let mut ds = Dataset { graphs: Vec::new(), train: Vec::new(), val_seen: Vec::new(), val_unseen: Vec::new() };
    let mut next_id = 0u32;
    for (gi, graph) in graphs.iter().enumerate() {
        let mut pairs = candidate_pairs(graph, env, cfg)?;
        let mut r = rng::stream(seed, &[rng::label("episodes"), graph.seed()]);
        pairs.shuffle(&mut r);
        let wanted: Vec<(Split, usize)> = if gi < n_seen {
            alloc::vec![(Split::Train, cfg.train_episodes_per_graph), (Split::ValSeen, cfg.val_seen_episodes_per_graph)]
        } else {
            alloc::vec![(Split::ValUnseen, cfg.unseen_episodes_per_graph)]
        };
        let total: usize = wanted.iter().map(|w| w.1).sum();
        if pairs.len() < total {
            return Err(Error::EpisodeSampling(format!(
                "graph {} has {} admissible pairs, {} requested",
                graph.id(),
                pairs.len(),
                total
            )));
        }
        let mut it = pairs.into_iter();
        for (split, n) in wanted {
            for (start, goal, path, len) in it.by_ref().take(n) {
                let iseed = rng::derive_seed(seed, &[rng::label("instruction"), next_id as u64]);
                let instruction = generate_instruction(graph, &path, &vocab, &env.instruction, iseed)?;
                let spec = EpisodeSpec {
                    id: next_id,
                    graph_id: graph.id(),
                    start,
                    goal,
                    instruction,
                    expert_path: path,
                    expert_length: len,
                };
                next_id += 1;
                let tr = expert_trajectory(graph, env, &spec)?;
                match split {
                    Split::Train => ds.train.push(tr),
                    Split::ValSeen => ds.val_seen.push(tr),
                    Split::ValUnseen => ds.val_unseen.push(tr),
                }
            }
        }
    }
    ds.graphs = graphs;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::path::{geodesic, shortest_path};
    use crate::env::world::WorldConfig;
    use alloc::collections::BTreeMap;

    fn small() -> (EnvConfig, DatasetConfig) {
        let env = EnvConfig { world: WorldConfig { n_viewpoints: 25, ..Default::default() }, ..Default::default() };
        let cfg = DatasetConfig {
            n_train_graphs: 2,
            n_unseen_graphs: 1,
            train_episodes_per_graph: 20,
            val_seen_episodes_per_graph: 5,
            unseen_episodes_per_graph: 10,
            ..Default::default()
        };
        (env, cfg)
    }

    #[test]
    fn one_graph_cannot_make_an_unseen_split() {
        let (env, cfg) = small();
        let g = generate_worlds(&env, 1, 0).unwrap();
        assert_eq!(make_dataset(g, &env, &cfg, 0), Err(Error::InsufficientGraphs(1)));
    }

    #[test]
    fn experts_are_optimal_and_well_formed() {
        let (env, cfg) = small();
        let ds = make_dataset(generate_worlds(&env, 3, 1).unwrap(), &env, &cfg, 1).unwrap();
        assert_eq!((ds.train.len(), ds.val_seen.len(), ds.val_unseen.len()), (40, 10, 10));
        for s in Split::ALL {
            for tr in ds.split(s) {
                let g = ds.graph(tr.episode.graph_id).unwrap();
                tr.validate(g, env.step_budget).unwrap();
                tr.episode.validate(g).unwrap();
                assert_eq!(tr.steps.last().unwrap().action, 0);
                assert!(tr.outcome.success);
                assert_eq!(tr.outcome.final_distance, 0.0);
                let (_, l) = shortest_path(g, tr.episode.start, tr.episode.goal).unwrap();
                assert!((l - tr.episode.expert_length).abs() < 1e-12);
                let d = geodesic(g, tr.episode.start, tr.episode.goal).unwrap();
                assert!((tr.total_return() - (d + env.terminal_bonus)).abs() < 1e-9);
                assert!(tr.len() <= env.step_budget);
            }
        }
        let unseen: Vec<u32> = ds.val_unseen.iter().map(|t| t.episode.graph_id).collect();
        assert!(ds.train.iter().all(|t| !unseen.contains(&t.episode.graph_id)));
    }

    #[test]
    fn deterministic() {
        let (env, cfg) = small();
        let a = make_dataset(generate_worlds(&env, 3, 5).unwrap(), &env, &cfg, 5).unwrap();
        let b = make_dataset(generate_worlds(&env, 3, 5).unwrap(), &env, &cfg, 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn train_and_val_seen_pairs_are_disjoint() {
        let (env, cfg) = small();
        let ds = make_dataset(generate_worlds(&env, 3, 2).unwrap(), &env, &cfg, 2).unwrap();
        let key = |t: &Trajectory| (t.episode.graph_id, t.episode.start, t.episode.goal);
        let train: Vec<_> = ds.train.iter().map(key).collect();
        assert!(ds.val_seen.iter().all(|t| !train.contains(&key(t))));
    }

    #[test]
    fn instructions_discriminate_paths() {
        // Every pair of distinct expert paths sharing a start gets distinct
        // instructions, across all admissible pairs of several worlds.
        let env = EnvConfig::default();
        let cfg = DatasetConfig::default();
        let vocab = Vocabulary::new(env.world.n_landmarks);
        for g in generate_worlds(&env, 4, 3).unwrap() {
            let mut by_start: BTreeMap<ViewpointId, Vec<(Vec<ViewpointId>, Vec<_>)>> = BTreeMap::new();
            for (i, (s, _, p, _)) in candidate_pairs(&g, &env, &cfg).unwrap().into_iter().enumerate() {
                let toks = generate_instruction(&g, &p, &vocab, &env.instruction, i as u64).unwrap();
                by_start.entry(s).or_default().push((p, toks));
            }
            for list in by_start.values() {
                for i in 0..list.len() {
                    for j in i + 1..list.len() {
                        assert_ne!(list[i].1, list[j].1, "{:?} vs {:?}", list[i].0, list[j].0);
                    }
                }
            }
        }
    }
}
