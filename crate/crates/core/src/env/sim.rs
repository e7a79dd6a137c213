//! Episode simulation: stepping, rewards and trajectories.

use alloc::format;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use super::instruction::{InstructionConfig, Token};
use super::observe::{observe, Action, Observation};
use super::path::{distances_from, path_length};
use super::world::{NavGraph, ViewpointId, WorldConfig};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub world: WorldConfig,
    pub instruction: InstructionConfig,
    pub feature_seed: u64,
    pub step_budget: usize,
    /// Metres; success is inclusive at the boundary.
    pub success_threshold: f64,
    pub terminal_bonus: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            world: WorldConfig::default(),
            instruction: InstructionConfig::default(),
            feature_seed: 0,
            step_budget: 15,
            success_threshold: 3.0,
            terminal_bonus: 2.0,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.step_budget == 0 {
            return bad("step_budget must be positive");
        }
        if !(self.success_threshold > 0.0) || !self.success_threshold.is_finite() {
            return bad("success_threshold must be positive");
        }
        if !(self.terminal_bonus >= 0.0) || !self.terminal_bonus.is_finite() {
            return bad("terminal_bonus must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.instruction.forward_prob) {
            return bad("forward_prob must be in [0, 1]");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub id: u32,
    pub graph_id: u32,
    pub start: ViewpointId,
    pub goal: ViewpointId,
    pub instruction: Vec<Token>,
    pub expert_path: Vec<ViewpointId>,
    pub expert_length: f64,
}

impl EpisodeSpec {
    pub fn validate(&self, graph: &NavGraph) -> Result<()> {
        let bad = |m: alloc::string::String| Err(Error::MalformedTrajectory(m));
        if graph.id() != self.graph_id {
            return bad(format!("episode {} expects graph {}, got {}", self.id, self.graph_id, graph.id()));
        }
        if self.start == self.goal || !(self.expert_length > 0.0) {
            return bad(format!("episode {} is degenerate", self.id));
        }
        if self.expert_path.first() != Some(&self.start) || self.expert_path.last() != Some(&self.goal) {
            return bad(format!("episode {} expert path does not join start and goal", self.id));
        }
        let l = path_length(graph, &self.expert_path)?;
        if crate::math::abs(l - self.expert_length) > 1e-9 {
            return bad(format!("episode {} expert length {} != {}", self.id, self.expert_length, l));
        }
        if self.instruction.is_empty() {
            return bad(format!("episode {} has no instruction", self.id));
        }
        Ok(())
    }
}

/// What happens after one action.
#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    /// `None` once the episode is over.
    pub next_observation: Option<Observation>,
    pub reward: f64,
    pub done: bool,
    pub distance_to_goal: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStep {
    pub return_to_go: f64,
    pub observation: Observation,
    pub action: usize,
    pub reward: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub success: bool,
    pub final_viewpoint: ViewpointId,
    pub final_distance: f64,
    pub stopped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub episode: EpisodeSpec,
    pub steps: Vec<TrajectoryStep>,
    pub outcome: Outcome,
}

/// A step before returns are known.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub observation: Observation,
    pub action: usize,
    pub reward: f64,
}

impl Trajectory {
    /// Attach returns-to-go computed backwards, so that
    /// `rtg[t] == rtg[t + 1] + reward[t]` holds exactly.
    pub fn from_transitions(episode: EpisodeSpec, transitions: Vec<Transition>, outcome: Outcome) -> Result<Self> {
        if transitions.is_empty() {
            return Err(Error::MalformedTrajectory("no steps".into()));
        }
        let mut rtg = Vec::with_capacity(transitions.len());
        let mut acc = 0.0;
        for tr in transitions.iter().rev() {
            acc += tr.reward;
            rtg.push(acc);
        }
        rtg.reverse();
        let steps = transitions
            .into_iter()
            .zip(rtg)
            .map(|(tr, r)| TrajectoryStep { return_to_go: r, observation: tr.observation, action: tr.action, reward: tr.reward })
            .collect();
        Ok(Self { episode, steps, outcome })
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn total_return(&self) -> f64 {
        self.steps.first().map(|s| s.return_to_go).unwrap_or(0.0)
    }

    pub fn actions(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.action).collect()
    }

    /// Viewpoints visited, starting with the start and ending where the agent
    /// stopped or ran out of budget.
    pub fn visited(&self) -> Result<Vec<ViewpointId>> {
        let mut out = Vec::with_capacity(self.steps.len() + 1);
        let mut last = None;
        for s in &self.steps {
            out.push(s.observation.viewpoint);
            last = match s.observation.action_set().get(s.action)? {
                Action::Stop => None,
                Action::Move(n) => Some(n.viewpoint),
            };
        }
        out.extend(last);
        Ok(out)
    }

    /// Check every structural invariant against the graph and budget.
    pub fn validate(&self, graph: &NavGraph, step_budget: usize) -> Result<()> {
        let bad = |m: alloc::string::String| Err(Error::MalformedTrajectory(m));
        if self.steps.is_empty() {
            return bad("no steps".into());
        }
        if self.steps.len() > step_budget {
            return bad(format!("{} steps exceed budget {}", self.steps.len(), step_budget));
        }
        for (t, s) in self.steps.iter().enumerate() {
            let n = s.observation.n_actions();
            if s.action >= n {
                return bad(format!("step {} action {} of {}", t, s.action, n));
            }
            let next = self.steps.get(t + 1).map(|x| x.return_to_go).unwrap_or(0.0);
            if s.return_to_go != next + s.reward {
                return bad(format!("return-to-go recurrence broken at step {}", t));
            }
            if let Some(next) = self.steps.get(t + 1) {
                match s.observation.action_set().get(s.action)? {
                    Action::Stop => return bad(format!("STOP at step {} before the end", t)),
                    Action::Move(n) if n.viewpoint != next.observation.viewpoint => {
                        return bad(format!("step {} moves to {} but step {} is at {}", t, n.viewpoint.0, t + 1, next.observation.viewpoint.0))
                    }
                    Action::Move(_) => {}
                }
            }
        }
        let last = self.steps.last().unwrap();
        if last.action != 0 && self.steps.len() != step_budget {
            return bad("trajectory ends without STOP inside the budget".into());
        }
        if self.steps[0].observation.viewpoint != self.episode.start {
            return bad("trajectory does not begin at the start".into());
        }
        let visited = self.visited()?;
        path_length(graph, &visited)?;
        if visited.last() != Some(&self.outcome.final_viewpoint) {
            return bad("outcome does not match the final viewpoint".into());
        }
        Ok(())
    }
}

/// A running episode on one graph.
pub struct Episode<'g> {
    graph: &'g NavGraph,
    cfg: &'g EnvConfig,
    spec: EpisodeSpec,
    to_goal: Vec<f64>,
    current: ViewpointId,
    observation: Observation,
    steps: usize,
    done: bool,
    stopped: bool,
}

impl<'g> Episode<'g> {
    pub fn new(graph: &'g NavGraph, cfg: &'g EnvConfig, spec: EpisodeSpec) -> Result<Self> {
        graph.viewpoint(spec.start)?;
        let to_goal = distances_from(graph, spec.goal)?;
        let observation = observe(graph, spec.start, cfg.world.n_landmarks, cfg.feature_seed)?;
        let current = spec.start;
        Ok(Self { graph, cfg, spec, to_goal, current, observation, steps: 0, done: false, stopped: false })
    }

    pub fn observation(&self) -> &Observation {
        &self.observation
    }

    pub fn current(&self) -> ViewpointId {
        self.current
    }

    pub fn spec(&self) -> &EpisodeSpec {
        &self.spec
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn steps_taken(&self) -> usize {
        self.steps
    }

    pub fn distance_to_goal(&self) -> f64 {
        self.to_goal[self.current.index()]
    }

    /// Geodesic distance from any viewpoint to this episode's goal.
    pub fn distance_from(&self, v: ViewpointId) -> Result<f64> {
        self.to_goal.get(v.index()).copied().ok_or(Error::UnknownViewpoint(v.0))
    }

    /// Apply action `index` of the current action set.
    ///
    /// Moving earns the reduction in geodesic distance to the goal. STOP earns
    /// `+terminal_bonus` inside the success threshold and `-terminal_bonus`
    /// outside it. Running out of budget ends the episode with no bonus.
    pub fn step(&mut self, index: usize) -> Result<StepResult> {
        if self.done {
            return Err(Error::EpisodeFinished);
        }
        let action = self.observation.action_set().get(index)?;
        let d_prev = self.distance_to_goal();
        self.steps += 1;
        let reward = match action {
            Action::Stop => {
                self.done = true;
                self.stopped = true;
                if d_prev <= self.cfg.success_threshold {
                    self.cfg.terminal_bonus
                } else {
                    -self.cfg.terminal_bonus
                }
            }
            Action::Move(n) => {
                self.current = n.viewpoint;
                d_prev - self.distance_to_goal()
            }
        };
        if !self.done && self.steps >= self.cfg.step_budget {
            self.done = true;
        }
        let next_observation = if self.done {
            None
        } else {
            self.observation = observe(self.graph, self.current, self.cfg.world.n_landmarks, self.cfg.feature_seed)?;
            Some(self.observation.clone())
        };
        Ok(StepResult { next_observation, reward, done: self.done, distance_to_goal: self.distance_to_goal() })
    }

    pub fn outcome(&self) -> Outcome {
        let d = self.distance_to_goal();
        Outcome { success: d <= self.cfg.success_threshold, final_viewpoint: self.current, final_distance: d, stopped: self.stopped }
    }
}

/// Run one episode to completion with `policy`, which sees the current
/// observation and every transition so far and returns an action index.
pub fn run_episode<F>(graph: &NavGraph, cfg: &EnvConfig, spec: &EpisodeSpec, mut policy: F) -> Result<Trajectory>
where
    F: FnMut(&Observation, &[Transition]) -> Result<usize>,
{
    let mut ep = Episode::new(graph, cfg, spec.clone())?;
    let mut transitions: Vec<Transition> = Vec::new();
    while !ep.is_done() {
        let obs = ep.observation().clone();
        let action = policy(&obs, &transitions)?;
        let res = ep.step(action)?;
        transitions.push(Transition { observation: obs, action, reward: res.reward });
    }
    Trajectory::from_transitions(spec.clone(), transitions, ep.outcome())
}

/// Replay the expert path, then STOP.
pub fn expert_trajectory(graph: &NavGraph, cfg: &EnvConfig, spec: &EpisodeSpec) -> Result<Trajectory> {
    let path = spec.expert_path.clone();
    if path.len() > cfg.step_budget {
        return Err(Error::EpisodeSampling(format!("expert needs {} steps, budget is {}", path.len(), cfg.step_budget)));
    }
    run_episode(graph, cfg, spec, |obs, hist| match path.get(hist.len() + 1) {
        None => Ok(0),
        Some(next) => obs.action_to(*next).ok_or(Error::MissingEdge(obs.viewpoint.0, next.0)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::world::{Edge, Viewpoint};
    use alloc::vec;

    /// 0 -1.5- 1 -2.5- 2 -2.0- 3 -3.0- 4, plus a diagonal 0-3 of about 4.3.
    pub(crate) fn five() -> NavGraph {
        let vp = |i: u32, x: f64, y: f64| Viewpoint { id: ViewpointId(i), position: [x, y, 0.0], landmark: i as u8 };
        let pos = [(0.0, 0.0), (1.5, 0.0), (1.5, 2.5), (3.5, 2.5), (3.5, 5.5)];
        let vps: Vec<_> = pos.iter().enumerate().map(|(i, p)| vp(i as u32, p.0, p.1)).collect();
        let d = |a: usize, b: usize| {
            let (p, q) = (pos[a], pos[b]);
            libm::sqrt((p.0 - q.0) * (p.0 - q.0) + (p.1 - q.1) * (p.1 - q.1))
        };
        let e = |a: usize, b: usize| Edge { a: ViewpointId(a as u32), b: ViewpointId(b as u32), length: d(a, b) };
        NavGraph::from_parts(0, 0, vps, vec![e(0, 1), e(1, 2), e(2, 3), e(3, 4), e(0, 3)], true).unwrap()
    }

    fn spec(g: &NavGraph, start: u32, goal: u32) -> EpisodeSpec {
        let (p, l) = crate::env::path::shortest_path(g, ViewpointId(start), ViewpointId(goal)).unwrap();
        EpisodeSpec {
            id: 0,
            graph_id: g.id(),
            start: ViewpointId(start),
            goal: ViewpointId(goal),
            instruction: vec![Token(0)],
            expert_path: p,
            expert_length: l,
        }
    }

    #[test]
    fn stop_at_goal_earns_bonus() {
        let g = five();
        let cfg = EnvConfig::default();
        let mut s = spec(&g, 0, 4);
        s.start = ViewpointId(4);
        let mut ep = Episode::new(&g, &cfg, s).unwrap();
        let r = ep.step(0).unwrap();
        assert_eq!(r.reward, 2.0);
        assert!(r.done);
        assert!(r.next_observation.is_none());
        assert_eq!(ep.step(0), Err(Error::EpisodeFinished));
    }

    #[test]
    fn move_earns_progress() {
        let g = five();
        let cfg = EnvConfig::default();
        // distances to 4: node 3 is 3.0, node 2 is 5.0
        let mut s = spec(&g, 2, 4);
        s.start = ViewpointId(2);
        let mut ep = Episode::new(&g, &cfg, s).unwrap();
        assert!((ep.distance_to_goal() - 5.0).abs() < 1e-12);
        let a = ep.observation().action_to(ViewpointId(3)).unwrap();
        let r = ep.step(a).unwrap();
        assert!((r.reward - 2.0).abs() < 1e-12);
        assert!(!r.done);
    }

    #[test]
    fn expert_rewards_telescope() {
        let g = five();
        let cfg = EnvConfig::default();
        for (a, b) in [(0u32, 4u32), (1, 4), (4, 0), (2, 0)] {
            let s = spec(&g, a, b);
            let d = crate::env::path::geodesic(&g, s.start, s.goal).unwrap();
            let tr = expert_trajectory(&g, &cfg, &s).unwrap();
            let sum: f64 = tr.steps.iter().map(|x| x.reward).sum();
            assert!((sum - (d + cfg.terminal_bonus)).abs() < 1e-9);
            assert!((tr.total_return() - (d + cfg.terminal_bonus)).abs() < 1e-9);
            assert!(tr.outcome.success && tr.outcome.final_distance == 0.0);
            tr.validate(&g, cfg.step_budget).unwrap();
            assert_eq!(tr.visited().unwrap(), s.expert_path);
        }
    }

    #[test]
    fn budget_ends_without_bonus() {
        let g = five();
        let cfg = EnvConfig { step_budget: 3, ..Default::default() };
        let s = spec(&g, 0, 4);
        // Bounce 0 -> 1 -> 0 -> 1.
        let tr = run_episode(&g, &cfg, &s, |obs, _| {
            Ok(obs.action_to(if obs.viewpoint == ViewpointId(0) { ViewpointId(1) } else { ViewpointId(0) }).unwrap())
        })
        .unwrap();
        assert_eq!(tr.len(), 3);
        assert!(!tr.outcome.stopped);
        let sum: f64 = tr.steps.iter().map(|x| x.reward).sum();
        let d0 = crate::env::path::geodesic(&g, ViewpointId(0), ViewpointId(4)).unwrap();
        let d1 = crate::env::path::geodesic(&g, ViewpointId(1), ViewpointId(4)).unwrap();
        assert!((sum - (d0 - d1)).abs() < 1e-12);
        tr.validate(&g, 3).unwrap();
    }

    #[test]
    fn invalid_action_is_an_error() {
        let g = five();
        let cfg = EnvConfig::default();
        let mut ep = Episode::new(&g, &cfg, spec(&g, 0, 4)).unwrap();
        let n = ep.observation().n_actions();
        assert_eq!(ep.step(n), Err(Error::InvalidAction { index: n, len: n }));
    }

    #[test]
    fn stop_outside_threshold_is_penalised() {
        let g = five();
        let cfg = EnvConfig::default();
        let mut ep = Episode::new(&g, &cfg, spec(&g, 0, 4)).unwrap();
        assert_eq!(ep.step(0).unwrap().reward, -2.0);
    }
}
