//! Geodesic distances and the expert shortest-path oracle.

use alloc::collections::BinaryHeap;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use super::world::{NavGraph, ViewpointId};
use crate::error::{Error, Result};

/// Two path lengths closer than this are treated as equal when breaking ties.
pub const LENGTH_TOL: f64 = 1e-9;

#[derive(PartialEq)]
struct Item(f64, usize);

impl Eq for Item {}

impl Ord for Item {
    fn cmp(&self, other: &Self) -> Ordering {
        other.0.partial_cmp(&self.0).unwrap_or(Ordering::Equal).then(other.1.cmp(&self.1))
    }
}

impl PartialOrd for Item {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Dijkstra from `source`; unreachable nodes get `f64::INFINITY`.
pub fn distances_from(graph: &NavGraph, source: ViewpointId) -> Result<Vec<f64>> {
    graph.viewpoint(source)?;
    let mut dist = vec![f64::INFINITY; graph.len()];
    let mut heap = BinaryHeap::new();
    dist[source.index()] = 0.0;
    heap.push(Item(0.0, source.index()));
    while let Some(Item(d, v)) = heap.pop() {
        if d > dist[v] {
            continue;
        }
        for (u, w) in graph.neighbors(ViewpointId(v as u32))? {
            let nd = d + w;
            if nd < dist[u.index()] {
                dist[u.index()] = nd;
                heap.push(Item(nd, u.index()));
            }
        }
    }
    Ok(dist)
}

pub fn geodesic(graph: &NavGraph, a: ViewpointId, b: ViewpointId) -> Result<f64> {
    graph.viewpoint(b)?;
    Ok(distances_from(graph, a)?[b.index()])
}

/// Metrically shortest path from `a` to `b`. Among equally short paths the
/// lexicographically smallest id sequence wins.
pub fn shortest_path(graph: &NavGraph, a: ViewpointId, b: ViewpointId) -> Result<(Vec<ViewpointId>, f64)> {
    graph.viewpoint(a)?;
    let to_goal = distances_from(graph, b)?;
    path_along(graph, a, b, &to_goal)
}

/// Greedy walk down a distance-to-goal field, smallest id first. Every
/// suffix of a shortest path is shortest, so this yields the lexicographic
/// minimum among shortest paths.
pub fn path_along(graph: &NavGraph, a: ViewpointId, b: ViewpointId, to_goal: &[f64]) -> Result<(Vec<ViewpointId>, f64)> {
    if !to_goal[a.index()].is_finite() {
        return Err(Error::EpisodeSampling(alloc::format!("{} cannot reach {}", a.0, b.0)));
    }
    let mut path = vec![a];
    let mut length = 0.0;
    let mut v = a;
    while v != b {
        let dv = to_goal[v.index()];
        let next = graph
            .neighbors(v)?
            .iter()
            .find(|(u, w)| crate::math::abs(w + to_goal[u.index()] - dv) <= LENGTH_TOL * (1.0 + dv))
            .copied()
            .ok_or(Error::EpisodeSampling(alloc::format!("no descent from {}", v.0)))?;
        length += next.1;
        path.push(next.0);
        v = next.0;
        if path.len() > graph.len() {
            return Err(Error::EpisodeSampling("shortest path walk did not terminate".into()));
        }
    }
    Ok((path, length))
}

/// Sum of edge lengths along `path`; errors on a missing edge.
pub fn path_length(graph: &NavGraph, path: &[ViewpointId]) -> Result<f64> {
    let mut total = 0.0;
    for w in path.windows(2) {
        total += graph.edge_length(w[0], w[1])?;
    }
    Ok(total)
}
