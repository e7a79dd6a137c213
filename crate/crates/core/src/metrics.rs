//! Trajectory length, navigation error, success rate and SPL.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write;
use serde::{Deserialize, Serialize};

use crate::env::path::{geodesic, path_length};
use crate::env::{NavGraph, Trajectory, ViewpointId};
use crate::error::{Error, Result};

/// Metres travelled: the summed length of every traversed edge.
pub fn trajectory_length(tr: &Trajectory, graph: &NavGraph) -> Result<f64> {
    path_length(graph, &tr.visited()?)
}

/// Geodesic distance from where the agent ended to the goal.
pub fn navigation_error(final_viewpoint: ViewpointId, goal: ViewpointId, graph: &NavGraph) -> Result<f64> {
    geodesic(graph, final_viewpoint, goal)
}

/// Inclusive at the threshold.
pub fn success(navigation_error: f64, threshold: f64) -> bool {
    navigation_error <= threshold
}

/// `S · l / max(p, l)`.
pub fn spl(success: bool, shortest: f64, path: f64) -> Result<f64> {
    if !(shortest > 0.0) || !shortest.is_finite() {
        return Err(Error::InvalidConfig(format!("shortest path length {} must be positive", shortest)));
    }
    if !(path >= 0.0) {
        return Err(Error::InvalidConfig(format!("path length {} must be non-negative", path)));
    }
    Ok(if success { shortest / path.max(shortest) } else { 0.0 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: u32,
    pub graph: u32,
    pub trajectory_length: f64,
    pub navigation_error: f64,
    pub success: bool,
    pub spl: f64,
}

/// Averages over an episode set. `sr` and `spl` are percentages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_episodes: usize,
    pub tl: f64,
    pub ne: f64,
    pub sr: f64,
    pub spl: f64,
    pub episodes: Vec<EpisodeRecord>,
}

impl EpisodeRecord {
    pub fn from_trajectory(tr: &Trajectory, graph: &NavGraph, threshold: f64) -> Result<Self> {
        let tl = trajectory_length(tr, graph)?;
        let ne = navigation_error(tr.outcome.final_viewpoint, tr.episode.goal, graph)?;
        let ok = success(ne, threshold);
        Ok(Self {
            episode: tr.episode.id,
            graph: graph.id(),
            trajectory_length: tl,
            navigation_error: ne,
            success: ok,
            spl: spl(ok, tr.episode.expert_length, tl)?,
        })
    }
}

impl MetricsReport {
    pub fn from_records(episodes: Vec<EpisodeRecord>) -> Result<Self> {
        if episodes.is_empty() {
            return Err(Error::Empty("episode set"));
        }
        let n = episodes.len() as f64;
        let mean = |f: &dyn Fn(&EpisodeRecord) -> f64| episodes.iter().map(f).sum::<f64>() / n;
        Ok(Self {
            n_episodes: episodes.len(),
            tl: mean(&|e| e.trajectory_length),
            ne: mean(&|e| e.navigation_error),
            sr: 100.0 * mean(&|e| if e.success { 1.0 } else { 0.0 }),
            spl: 100.0 * mean(&|e| e.spl),
            episodes,
        })
    }

    /// Look up each trajectory's graph by id and aggregate.
    pub fn from_trajectories<'a>(trajs: &[Trajectory], graph: impl Fn(u32) -> Result<&'a NavGraph>, threshold: f64) -> Result<Self> {
        let records = trajs
            .iter()
            .map(|t| EpisodeRecord::from_trajectory(t, graph(t.episode.graph_id)?, threshold))
            .collect::<Result<Vec<_>>>()?;
        Self::from_records(records)
    }
}

/// Fixed-width table with TL, NE, SR and SPL per split, one row per model.
/// A missing cell prints as dashes.
pub fn format_table(splits: &[&str], rows: &[(String, Vec<Option<MetricsReport>>)]) -> String {
    let mut out = String::new();
    let _ = write!(out, "{:<24}", "");
    for s in splits {
        let _ = write!(out, " | {:^31}", s);
    }
    out.push('\n');
    let _ = write!(out, "{:<24}", "model");
    for _ in splits {
        let _ = write!(out, " | {:>7} {:>7} {:>7} {:>7}", "TL", "NE", "SR", "SPL");
    }
    out.push('\n');
    let width = 24 + splits.len() * 34;
    out.extend(core::iter::repeat('-').take(width));
    out.push('\n');
    for (name, cells) in rows {
        let _ = write!(out, "{:<24}", name);
        for c in cells {
            match c {
                Some(m) => {
                    let _ = write!(out, " | {:>7.2} {:>7.2} {:>7.2} {:>7.2}", m.tl, m.ne, m.sr, m.spl);
                }
                None => {
                    let _ = write!(out, " | {:>7} {:>7} {:>7} {:>7}", "--", "--", "--", "--");
                }
            }
        }
        out.push('\n');
    }
    out
}
