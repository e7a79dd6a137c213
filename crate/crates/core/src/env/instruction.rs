//! Templated instructions.
//!
//! Every hop of the expert path becomes two tokens, followed by a closing
//! pair, so slot `t` of the instruction describes step `t`:
//!
//! * `[GO, LM_k]`: move to the neighbour showing landmark `k`.
//! * `[DIR_s, LM_k]`: the same, with a compass sector when the landmark alone
//!   is ambiguous among the neighbours.
//! * `[FORWARD, ONWARD]`: keep going in the direction of the previous move.
//!   Only emitted when that direction singles out the next viewpoint, so
//!   following it requires remembering the previous move.
//! * `[HALT, END]`: stop here.

use alloc::format;
use alloc::vec::Vec;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::world::{NavGraph, ViewpointId};
use crate::error::{Error, Result};
use crate::{math, rng};

pub const N_SECTORS: u16 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Token(pub u16);

impl Token {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Token layout: sectors, then landmarks, then the five function words.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub n_landmarks: u8,
}

impl Vocabulary {
    pub fn new(n_landmarks: u8) -> Self {
        Self { n_landmarks }
    }

    pub fn sector(&self, s: u16) -> Token {
        Token(s % N_SECTORS)
    }

    pub fn landmark(&self, k: u8) -> Token {
        Token(N_SECTORS + k as u16)
    }

    fn word(&self, i: u16) -> Token {
        Token(N_SECTORS + self.n_landmarks as u16 + i)
    }

    pub fn go(&self) -> Token {
        self.word(0)
    }

    pub fn forward(&self) -> Token {
        self.word(1)
    }

    pub fn onward(&self) -> Token {
        self.word(2)
    }

    pub fn halt(&self) -> Token {
        self.word(3)
    }

    pub fn end(&self) -> Token {
        self.word(4)
    }

    pub fn size(&self) -> usize {
        N_SECTORS as usize + self.n_landmarks as usize + 5
    }

    pub fn as_sector(&self, t: Token) -> Option<u16> {
        (t.0 < N_SECTORS).then_some(t.0)
    }

    pub fn as_landmark(&self, t: Token) -> Option<u8> {
        (t.0 >= N_SECTORS && t.0 < N_SECTORS + self.n_landmarks as u16).then(|| (t.0 - N_SECTORS) as u8)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InstructionConfig {
    /// Chance that an eligible hop is phrased as "keep going".
    pub forward_prob: f64,
    /// Largest turn, in degrees, still described as going forward.
    pub forward_max_turn: f64,
    /// Required angular gap, in degrees, to the runner-up neighbour.
    pub forward_margin: f64,
}

impl Default for InstructionConfig {
    fn default() -> Self {
        Self { forward_prob: 0.85, forward_max_turn: 60.0, forward_margin: 30.0 }
    }
}

fn sector_of(heading: f64) -> u16 {
    let w = 2.0 * core::f64::consts::PI / N_SECTORS as f64;
    (math::round(heading / w) as i64).rem_euclid(N_SECTORS as i64) as u16
}

/// The neighbour of `cur` that continues the move `prev -> cur`, if one is
/// both close enough in direction and clearly ahead of the others.
pub fn forward_neighbor(graph: &NavGraph, prev: ViewpointId, cur: ViewpointId, cfg: &InstructionConfig) -> Result<Option<ViewpointId>> {
    let h = graph.heading(prev, cur)?;
    let mut turns: Vec<(f64, ViewpointId)> = Vec::new();
    for (u, _) in graph.neighbors(cur)? {
        turns.push((math::angle_between(graph.heading(cur, *u)?, h), *u));
    }
    turns.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    let deg = core::f64::consts::PI / 180.0;
    match turns.as_slice() {
        [] => Ok(None),
        [(t, u)] => Ok((*t <= cfg.forward_max_turn * deg).then_some(*u)),
        [(t0, u), (t1, _), ..] => {
            Ok((*t0 <= cfg.forward_max_turn * deg && *t1 - *t0 >= cfg.forward_margin * deg).then_some(*u))
        }
    }
}

fn path_hash(path: &[ViewpointId]) -> u64 {
    math::fnv1a(path.iter().flat_map(|v| v.0.to_le_bytes()))
}

/// Describe `path` as tokens. Deterministic in `(graph, path, seed)`.
pub fn generate_instruction(
    graph: &NavGraph,
    path: &[ViewpointId],
    vocab: &Vocabulary,
    cfg: &InstructionConfig,
    seed: u64,
) -> Result<Vec<Token>> {
    if path.is_empty() {
        return Err(Error::Empty("instruction path"));
    }
    let mut r = rng::stream(seed, &[rng::label("instruction"), graph.seed(), path_hash(path)]);
    let mut out = Vec::with_capacity(2 * path.len());
    for t in 0..path.len() - 1 {
        let (cur, next) = (path[t], path[t + 1]);
        graph.edge_length(cur, next)?;
        // Draw unconditionally so later hops do not depend on eligibility.
        let coin = r.gen::<f64>();
        if t > 0 && coin < cfg.forward_prob && forward_neighbor(graph, path[t - 1], cur, cfg)? == Some(next) {
            out.push(vocab.forward());
            out.push(vocab.onward());
            continue;
        }
        let lm = graph.viewpoint(next)?.landmark;
        if lm >= vocab.n_landmarks {
            return Err(Error::InvalidConfig(format!("landmark {} outside vocabulary", lm)));
        }
        let shared = graph
            .neighbors(cur)?
            .iter()
            .filter(|(u, _)| graph.viewpoints()[u.index()].landmark == lm)
            .count();
        if shared > 1 {
            out.push(vocab.sector(sector_of(graph.heading(cur, next)?)));
        } else {
            out.push(vocab.go());
        }
        out.push(vocab.landmark(lm));
    }
    out.push(vocab.halt());
    out.push(vocab.end());
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::world::{generate_world, Edge, Viewpoint, WorldConfig};
    use alloc::vec;

    fn line() -> NavGraph {
        // 0 - 1 - 2 in a straight line, with 3 branching off 1 at a right angle.
        let vp = |i: u32, x: f64, y: f64, lm: u8| Viewpoint { id: ViewpointId(i), position: [x, y, 0.0], landmark: lm };
        let e = |a: u32, b: u32, l: f64| Edge { a: ViewpointId(a), b: ViewpointId(b), length: l };
        NavGraph::from_parts(
            0,
            0,
            vec![vp(0, 0.0, 0.0, 0), vp(1, 2.0, 0.0, 1), vp(2, 4.0, 0.0, 2), vp(3, 2.0, 2.0, 3)],
            vec![e(0, 1, 2.0), e(1, 2, 2.0), e(1, 3, 2.0)],
            true,
        )
        .unwrap()
    }

    #[test]
    fn single_hop_is_nonempty_and_closed() {
        let g = line();
        let v = Vocabulary::new(12);
        let toks = generate_instruction(&g, &[ViewpointId(0), ViewpointId(1)], &v, &InstructionConfig::default(), 0).unwrap();
        assert_eq!(toks, vec![v.go(), v.landmark(1), v.halt(), v.end()]);
    }

    #[test]
    fn straight_continuation_is_forward() {
        let g = line();
        let v = Vocabulary::new(12);
        let cfg = InstructionConfig { forward_prob: 1.0, ..Default::default() };
        let p = [ViewpointId(0), ViewpointId(1), ViewpointId(2)];
        let toks = generate_instruction(&g, &p, &v, &cfg, 0).unwrap();
        assert_eq!(&toks[2..4], &[v.forward(), v.onward()]);
        let p = [ViewpointId(0), ViewpointId(1), ViewpointId(3)];
        let toks = generate_instruction(&g, &p, &v, &cfg, 0).unwrap();
        assert_eq!(&toks[2..4], &[v.go(), v.landmark(3)]);
    }

    #[test]
    fn empty_path_is_an_error() {
        let g = line();
        assert!(generate_instruction(&g, &[], &Vocabulary::new(12), &InstructionConfig::default(), 0).is_err());
    }

    #[test]
    fn deterministic_and_within_vocabulary() {
        let g = generate_world(0, 9, &WorldConfig::default()).unwrap();
        let v = Vocabulary::new(12);
        let cfg = InstructionConfig::default();
        for goal in 1..g.len() as u32 {
            let (p, _) = crate::env::path::shortest_path(&g, ViewpointId(0), ViewpointId(goal)).unwrap();
            let a = generate_instruction(&g, &p, &v, &cfg, 4).unwrap();
            assert_eq!(a, generate_instruction(&g, &p, &v, &cfg, 4).unwrap());
            assert_eq!(a.len(), 2 * p.len());
            assert!(a.iter().all(|t| t.index() < v.size()));
        }
    }

    #[test]
    fn vocabulary_classes_do_not_overlap() {
        let v = Vocabulary::new(12);
        assert_eq!(v.as_sector(v.sector(3)), Some(3));
        assert_eq!(v.as_landmark(v.landmark(11)), Some(11));
        assert_eq!(v.as_landmark(v.go()), None);
        assert_eq!(v.end().index(), v.size() - 1);
    }
}
