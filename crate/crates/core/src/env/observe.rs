//! Panoramic observations and action sets.

use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::world::{NavGraph, ViewpointId};
use crate::error::{Error, Result};
use crate::{math, rng};

/// Views per panorama, one every 10 degrees.
pub const N_VIEWS: usize = 36;
/// Per-view nuisance dimensions appended to every raw feature.
pub const N_SCENERY: usize = 4;

/// Length of a raw view feature for a world with `n_landmarks` categories:
/// landmark one-hot, heading cosine and sine, scenery.
pub fn raw_feature_dim(n_landmarks: u8) -> usize {
    n_landmarks as usize + 2 + N_SCENERY
}

pub fn view_heading(index: usize) -> f64 {
    index as f64 * 2.0 * core::f64::consts::PI / N_VIEWS as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct View {
    pub heading_index: u8,
    pub feature: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NavigableView {
    pub view: u8,
    pub viewpoint: ViewpointId,
}

/// What the agent sees at one viewpoint. `navigable` is sorted by view index
/// and action `i >= 1` moves to `navigable[i - 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub viewpoint: ViewpointId,
    pub views: Vec<View>,
    pub navigable: Vec<NavigableView>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    Stop,
    Move(NavigableView),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActionSet {
    actions: Vec<Action>,
}

impl ActionSet {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    /// Never true: STOP is always present.
    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn get(&self, index: usize) -> Result<Action> {
        self.actions.get(index).copied().ok_or(Error::InvalidAction { index, len: self.actions.len() })
    }

    pub fn iter(&self) -> impl Iterator<Item = &Action> {
        self.actions.iter()
    }
}

impl Observation {
    pub fn action_set(&self) -> ActionSet {
        let mut actions = Vec::with_capacity(self.navigable.len() + 1);
        actions.push(Action::Stop);
        actions.extend(self.navigable.iter().map(|n| Action::Move(*n)));
        ActionSet { actions }
    }

    pub fn n_actions(&self) -> usize {
        self.navigable.len() + 1
    }

    /// Action index that moves to `target`, if it is navigable.
    pub fn action_to(&self, target: ViewpointId) -> Option<usize> {
        self.navigable.iter().position(|n| n.viewpoint == target).map(|i| i + 1)
    }

    /// Raw feature behind action `index` (`None` for STOP).
    pub fn candidate_feature(&self, index: usize) -> Result<Option<&[f64]>> {
        match self.action_set().get(index)? {
            Action::Stop => Ok(None),
            Action::Move(n) => Ok(Some(&self.views[n.view as usize].feature)),
        }
    }
}

/// Assign each neighbour the view nearest its heading; a taken view passes
/// the neighbour to the nearest free one (lower index first on equal offset).
fn assign_views(graph: &NavGraph, v: ViewpointId) -> Result<Vec<NavigableView>> {
    let mut taken = [false; N_VIEWS];
    let mut out = Vec::new();
    for (u, _) in graph.neighbors(v)? {
        let h = graph.heading(v, *u)?;
        let ideal = math::round(h / view_heading(1)) as i64;
        let slot = (0..=N_VIEWS as i64 / 2)
            .flat_map(|off| [ideal - off, ideal + off])
            .map(|i| i.rem_euclid(N_VIEWS as i64) as usize)
            .find(|i| !taken[*i])
            .ok_or(Error::InvalidConfig(alloc::format!("viewpoint {} has more than {} neighbours", v.0, N_VIEWS)))?;
        taken[slot] = true;
        out.push(NavigableView { view: slot as u8, viewpoint: *u });
    }
    out.sort_by_key(|n| n.view);
    Ok(out)
}

/// Build the 36-view panorama at `v`. Features are a pure function of the
/// graph seed, viewpoint, heading and `feature_seed`.
pub fn observe(graph: &NavGraph, v: ViewpointId, n_landmarks: u8, feature_seed: u64) -> Result<Observation> {
    graph.viewpoint(v)?;
    let navigable = assign_views(graph, v)?;
    let dim = raw_feature_dim(n_landmarks);
    let mut views = Vec::with_capacity(N_VIEWS);
    for k in 0..N_VIEWS {
        let mut f = vec![0.0; dim];
        if let Some(n) = navigable.iter().find(|n| n.view as usize == k) {
            let lm = graph.viewpoint(n.viewpoint)?.landmark;
            if lm >= n_landmarks {
                return Err(Error::InvalidConfig(alloc::format!("landmark {} outside {} categories", lm, n_landmarks)));
            }
            f[lm as usize] = 1.0;
        }
        let h = view_heading(k);
        f[n_landmarks as usize] = math::cos(h);
        f[n_landmarks as usize + 1] = math::sin(h);
        let mut r = rng::stream(feature_seed, &[rng::label("scenery"), graph.seed(), v.0 as u64, k as u64]);
        for x in &mut f[n_landmarks as usize + 2..] {
            *x = math::round((r.gen::<f64>() * 2.0 - 1.0) * 1e4) / 1e4;
        }
        views.push(View { heading_index: k as u8, feature: f });
    }
    Ok(Observation { viewpoint: v, views, navigable })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::world::{generate_world, Edge, Viewpoint, WorldConfig};

    fn fragment() -> NavGraph {
        let vp = |i: u32, x: f64, y: f64| Viewpoint { id: ViewpointId(i), position: [x, y, 0.0], landmark: i as u8 };
        let e = |a: u32, b: u32, l: f64| Edge { a: ViewpointId(a), b: ViewpointId(b), length: l };
        NavGraph::from_parts(
            0,
            1,
            vec![vp(0, 0.0, 0.0), vp(1, 2.0, 0.0), vp(2, 0.0, 2.0), vp(3, -2.0, 0.0), vp(4, 9.0, 9.0)],
            vec![e(0, 1, 2.0), e(0, 2, 2.0), e(0, 3, 2.0)],
            false,
        )
        .unwrap()
    }

    #[test]
    fn isolated_node_only_stops() {
        let g = fragment();
        let o = observe(&g, ViewpointId(4), 12, 0).unwrap();
        assert!(o.navigable.is_empty());
        assert_eq!(o.views.len(), N_VIEWS);
        let a = o.action_set();
        assert_eq!(a.len(), 1);
        assert_eq!(a.get(0).unwrap(), Action::Stop);
    }

    #[test]
    fn three_neighbours_get_distinct_views_by_heading() {
        let g = fragment();
        let o = observe(&g, ViewpointId(0), 12, 0).unwrap();
        assert_eq!(o.navigable.len(), 3);
        let views: Vec<u8> = o.navigable.iter().map(|n| n.view).collect();
        assert_eq!(views, vec![0, 9, 18]);
        let ids: Vec<u32> = o.navigable.iter().map(|n| n.viewpoint.0).collect();
        assert_eq!(ids, vec![1, 2, 3]);
        assert_eq!(o.views[9].feature[2], 1.0);
        assert_eq!(o.action_to(ViewpointId(3)), Some(3));
    }

    #[test]
    fn unknown_viewpoint_is_an_error() {
        assert_eq!(observe(&fragment(), ViewpointId(9), 12, 0), Err(Error::UnknownViewpoint(9)));
    }

    #[test]
    fn observations_are_deterministic_and_cover_neighbours() {
        let g = generate_world(0, 5, &WorldConfig::default()).unwrap();
        for v in 0..g.len() as u32 {
            let v = ViewpointId(v);
            let a = observe(&g, v, 12, 3).unwrap();
            assert_eq!(a, observe(&g, v, 12, 3).unwrap());
            let mut got: Vec<_> = a.navigable.iter().map(|n| n.viewpoint).collect();
            got.sort();
            let want: Vec<_> = g.neighbors(v).unwrap().iter().map(|n| n.0).collect();
            assert_eq!(got, want);
            let mut keys: Vec<_> = a.navigable.iter().map(|n| n.view).collect();
            keys.dedup();
            assert_eq!(keys.len(), a.navigable.len());
            assert_eq!(a.action_set().len(), a.navigable.len() + 1);
        }
        let o1 = observe(&g, ViewpointId(0), 12, 3).unwrap();
        let o2 = observe(&g, ViewpointId(0), 12, 4).unwrap();
        assert_ne!(o1.views[0].feature, o2.views[0].feature);
    }
}
