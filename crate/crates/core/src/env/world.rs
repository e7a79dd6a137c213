//! Synthetic navigation graphs.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ViewpointId(pub u32);

impl ViewpointId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Viewpoint {
    pub id: ViewpointId,
    /// Metres.
    pub position: [f64; 3],
    /// Landmark category visible when looking at this viewpoint.
    pub landmark: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub a: ViewpointId,
    pub b: ViewpointId,
    /// Euclidean distance between the endpoints, metres.
    pub length: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub n_viewpoints: usize,
    pub target_degree: f64,
    /// Typical spacing between neighbouring viewpoints, metres.
    pub spacing: f64,
    pub n_landmarks: u8,
    pub max_degree: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self { n_viewpoints: 30, target_degree: 3.0, spacing: 4.0, n_landmarks: 12, max_degree: 7 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RawGraph {
    id: u32,
    seed: u64,
    viewpoints: Vec<Viewpoint>,
    edges: Vec<Edge>,
}

/// An undirected, connected graph of viewpoints with metric edge lengths.
///
/// Viewpoint ids are dense: viewpoint `i` has id `i`. Edges are stored with
/// `a < b`, sorted, and the adjacency lists are sorted by neighbour id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawGraph", into = "RawGraph")]
pub struct NavGraph {
    id: u32,
    seed: u64,
    viewpoints: Vec<Viewpoint>,
    edges: Vec<Edge>,
    adjacency: Vec<Vec<(ViewpointId, f64)>>,
}

impl TryFrom<RawGraph> for NavGraph {
    type Error = Error;
    fn try_from(r: RawGraph) -> Result<Self> {
        NavGraph::from_parts(r.id, r.seed, r.viewpoints, r.edges, true)
    }
}

impl From<NavGraph> for RawGraph {
    fn from(g: NavGraph) -> Self {
        RawGraph { id: g.id, seed: g.seed, viewpoints: g.viewpoints, edges: g.edges }
    }
}

fn dist3(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    math::sqrt((a[0] - b[0]) * (a[0] - b[0]) + (a[1] - b[1]) * (a[1] - b[1]) + (a[2] - b[2]) * (a[2] - b[2]))
}

impl NavGraph {
    /// Build a graph and validate its invariants. `require_connected` is only
    /// relaxed for hand-built fragments in tests.
    pub fn from_parts(
        id: u32,
        seed: u64,
        viewpoints: Vec<Viewpoint>,
        mut edges: Vec<Edge>,
        require_connected: bool,
    ) -> Result<Self> {
        let n = viewpoints.len();
        for (i, v) in viewpoints.iter().enumerate() {
            if v.id.index() != i {
                return Err(Error::InvalidConfig(format!("viewpoint at index {} has id {}", i, v.id.0)));
            }
            if v.position.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidConfig(format!("viewpoint {} has a non-finite position", i)));
            }
        }
        let mut adjacency = vec![Vec::new(); n];
        for e in &mut edges {
            if e.a == e.b {
                return Err(Error::InvalidConfig(format!("self-loop at {}", e.a.0)));
            }
            if e.a.index() >= n || e.b.index() >= n {
                return Err(Error::UnknownViewpoint(e.a.0.max(e.b.0)));
            }
            if e.a > e.b {
                core::mem::swap(&mut e.a, &mut e.b);
            }
            let d = dist3(&viewpoints[e.a.index()].position, &viewpoints[e.b.index()].position);
            if math::abs(d - e.length) > 1e-9 {
                return Err(Error::InvalidConfig(format!(
                    "edge {}-{} has length {} but endpoints are {} apart",
                    e.a.0, e.b.0, e.length, d
                )));
            }
            adjacency[e.a.index()].push((e.b, e.length));
            adjacency[e.b.index()].push((e.a, e.length));
        }
        edges.sort_by(|x, y| (x.a, x.b).cmp(&(y.a, y.b)));
        if edges.windows(2).any(|w| w[0].a == w[1].a && w[0].b == w[1].b) {
            return Err(Error::InvalidConfig("duplicate edge".into()));
        }
        for adj in &mut adjacency {
            adj.sort_by(|x, y| x.0.cmp(&y.0));
        }
        let g = Self { id, seed, viewpoints, edges, adjacency };
        if require_connected && !g.is_connected() {
            return Err(Error::InvalidConfig("graph is not connected".into()));
        }
        Ok(g)
    }

    pub fn id(&self) -> u32 {
        self.id
    }

    /// Seed of this particular graph, derived from the generation seed and id.
    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn viewpoints(&self) -> &[Viewpoint] {
        &self.viewpoints
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn len(&self) -> usize {
        self.viewpoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.viewpoints.is_empty()
    }

    pub fn contains(&self, v: ViewpointId) -> bool {
        v.index() < self.viewpoints.len()
    }

    pub fn viewpoint(&self, v: ViewpointId) -> Result<&Viewpoint> {
        self.viewpoints.get(v.index()).ok_or(Error::UnknownViewpoint(v.0))
    }

    /// Neighbours sorted by id, with edge lengths.
    pub fn neighbors(&self, v: ViewpointId) -> Result<&[(ViewpointId, f64)]> {
        self.adjacency.get(v.index()).map(|a| a.as_slice()).ok_or(Error::UnknownViewpoint(v.0))
    }

    pub fn edge_length(&self, a: ViewpointId, b: ViewpointId) -> Result<f64> {
        self.neighbors(a)?
            .iter()
            .find(|(n, _)| *n == b)
            .map(|(_, l)| *l)
            .ok_or(Error::MissingEdge(a.0, b.0))
    }

    /// Heading (radians, `[0, 2π)`, in the x-y plane) from `a` towards `b`.
    pub fn heading(&self, a: ViewpointId, b: ViewpointId) -> Result<f64> {
        let pa = self.viewpoint(a)?.position;
        let pb = self.viewpoint(b)?.position;
        let mut h = math::atan2(pb[1] - pa[1], pb[0] - pa[0]);
        if h < 0.0 {
            h += 2.0 * core::f64::consts::PI;
        }
        Ok(h)
    }

    pub fn mean_degree(&self) -> f64 {
        if self.viewpoints.is_empty() {
            return 0.0;
        }
        2.0 * self.edges.len() as f64 / self.viewpoints.len() as f64
    }

    pub fn is_connected(&self) -> bool {
        let n = self.viewpoints.len();
        if n == 0 {
            return true;
        }
        let mut seen = vec![false; n];
        let mut stack = vec![0usize];
        seen[0] = true;
        while let Some(v) = stack.pop() {
            for (u, _) in &self.adjacency[v] {
                if !seen[u.index()] {
                    seen[u.index()] = true;
                    stack.push(u.index());
                }
            }
        }
        seen.iter().all(|s| *s)
    }
}

/// Generate a connected world: positions by rejection sampling with a minimum
/// separation, a Euclidean minimum spanning tree for connectivity, then the
/// shortest remaining pairs until the edge budget for `target_degree` is met.
pub fn generate_world(id: u32, seed: u64, cfg: &WorldConfig) -> Result<NavGraph> {
    let n = cfg.n_viewpoints;
    if n < 2 {
        return Err(Error::InvalidConfig(format!("need at least 2 viewpoints, got {}", n)));
    }
    if !(cfg.target_degree >= 1.0) {
        return Err(Error::InvalidConfig(format!("target degree {} < 1", cfg.target_degree)));
    }
    if cfg.n_landmarks == 0 || !(cfg.spacing > 0.0) {
        return Err(Error::InvalidConfig("need landmarks and positive spacing".into()));
    }
    let graph_seed = rng::derive_seed(seed, &[rng::label("world"), id as u64]);
    let mut r = rng::stream(graph_seed, &[]);
    let side = cfg.spacing * math::sqrt(n as f64) * 1.2;
    let min_sep = cfg.spacing * 0.5;
    let mut positions: Vec<[f64; 3]> = Vec::with_capacity(n);
    let mut attempts = 0usize;
    while positions.len() < n {
        attempts += 1;
        let sep = if attempts > 50_000 { min_sep * 0.25 } else { min_sep };
        let p = [r.gen::<f64>() * side, r.gen::<f64>() * side, math::round(r.gen::<f64>() * 3.0) * 0.1];
        if positions.iter().all(|q| dist3(&p, q) >= sep) {
            positions.push(p);
        }
    }
    // Quantise to millimetres so serialised worlds stay short.
    for p in &mut positions {
        for c in p.iter_mut() {
            *c = math::round(*c * 1000.0) / 1000.0;
        }
    }

    let d = |i: usize, j: usize| dist3(&positions[i], &positions[j]);
    let mut in_tree = vec![false; n];
    let mut best = vec![(f64::INFINITY, 0usize); n];
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    in_tree[0] = true;
    for j in 1..n {
        best[j] = (d(0, j), 0);
    }
    for _ in 1..n {
        let (j, _) = (0..n)
            .filter(|j| !in_tree[*j])
            .map(|j| (j, best[j].0))
            .fold((usize::MAX, f64::INFINITY), |acc, x| if x.1 < acc.1 { x } else { acc });
        in_tree[j] = true;
        let p = best[j].1;
        pairs.push((p.min(j), p.max(j)));
        for k in 0..n {
            if !in_tree[k] && d(j, k) < best[k].0 {
                best[k] = (d(j, k), j);
            }
        }
    }
    let mut degree = vec![0usize; n];
    for (a, b) in &pairs {
        degree[*a] += 1;
        degree[*b] += 1;
    }
    let target_edges = (math::round(cfg.target_degree * n as f64 / 2.0) as usize).max(n - 1);
    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if !pairs.contains(&(i, j)) {
                candidates.push((d(i, j), i, j));
            }
        }
    }
    candidates.sort_by(|x, y| x.0.partial_cmp(&y.0).unwrap().then((x.1, x.2).cmp(&(y.1, y.2))));
    for (_, i, j) in candidates {
        if pairs.len() >= target_edges {
            break;
        }
        if degree[i] < cfg.max_degree && degree[j] < cfg.max_degree {
            pairs.push((i, j));
            degree[i] += 1;
            degree[j] += 1;
        }
    }
    let landmarks = assign_landmarks(n, &pairs, cfg.n_landmarks, &mut r);
    let viewpoints: Vec<Viewpoint> = positions
        .iter()
        .zip(landmarks)
        .enumerate()
        .map(|(i, (p, landmark))| Viewpoint { id: ViewpointId(i as u32), position: *p, landmark })
        .collect();
    let edges = pairs
        .into_iter()
        .map(|(a, b)| Edge { a: ViewpointId(a as u32), b: ViewpointId(b as u32), length: d(a, b) })
        .collect();
    NavGraph::from_parts(id, graph_seed, viewpoints, edges, true)
}

/// Greedy colouring so that the neighbours of any viewpoint carry pairwise
/// distinct landmarks whenever the palette allows it.
fn assign_landmarks<R: Rng>(n: usize, pairs: &[(usize, usize)], n_landmarks: u8, r: &mut R) -> Vec<u8> {
    let mut adj = vec![Vec::new(); n];
    for (a, b) in pairs {
        adj[*a].push(*b);
        adj[*b].push(*a);
    }
    let mut out: Vec<Option<u8>> = vec![None; n];
    for i in 0..n {
        let mut used = vec![false; n_landmarks as usize];
        for v in &adj[i] {
            for u in &adj[*v] {
                if let Some(c) = out[*u] {
                    used[c as usize] = true;
                }
            }
        }
        let free: Vec<u8> = (0..n_landmarks).filter(|c| !used[*c as usize]).collect();
        out[i] = Some(if free.is_empty() { r.gen_range(0..n_landmarks) } else { free[r.gen_range(0..free.len())] });
    }
    out.into_iter().map(|c| c.unwrap_or(0)).collect()
}

/// True when every viewpoint's neighbours have pairwise distinct landmarks.
pub fn landmarks_locally_distinct(g: &NavGraph) -> bool {
    g.adjacency.iter().all(|adj| {
        let mut seen = [false; 256];
        adj.iter().all(|(u, _)| {
            let c = g.viewpoints[u.index()].landmark as usize;
            !core::mem::replace(&mut seen[c], true)
        })
    })
}
