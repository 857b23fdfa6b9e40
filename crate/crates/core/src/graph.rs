//! Patch graph: patches sampled per frame, (patch, target frame) edges,
//! expiry by removal window and pruning of edges without parallax.

use std::collections::{BTreeMap, VecDeque};
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::geometry::{reproject, Intrinsics, Pose};
use crate::model::ModelConfig;
use crate::patchifier::{FeatureMap, FeatureSet};

/// Default pruning threshold in feature pixels.
pub const DEFAULT_PRUNE_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub id: u64,
    pub frame_id: u64,
    /// Centre `(u, v)` in 1/4-resolution feature coordinates.
    pub center: [f64; 2],
    /// 3x3 matching-feature cells, row-major, `9 * Ch_MF` values.
    pub feature: Vec<f32>,
    /// Context vector at the centre, `Ch_CF` values.
    pub context: Vec<f32>,
    pub inv_depth: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Edge {
    pub id: u64,
    pub patch_id: u64,
    pub target_frame_id: u64,
    pub hidden: Vec<f32>,
    /// Most recent flow correction predicted by the update operator.
    pub last_flow: [f64; 2],
    /// Target location in the target frame handed to bundle adjustment.
    pub target: Option<[f64; 2]>,
    pub confidence: f64,
}

/// Matching features kept for correlation lookups.
#[derive(Debug, Clone, PartialEq)]
pub struct RetainedFrame {
    pub frame_id: u64,
    pub mf: FeatureMap,
    pub pyr: Option<FeatureMap>,
}

impl RetainedFrame {
    pub fn payload_bytes(&self) -> usize {
        self.mf.payload_bytes() + self.pyr.as_ref().map_or(0, FeatureMap::payload_bytes)
    }
}

/// Counts returned by [`PatchGraph::remove_expired`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Removed {
    pub patches: usize,
    pub edges: usize,
    pub frames: usize,
}

/// Closed-form number of live edges in a warmed-up graph.
pub fn n_edges(n_patches: u64, removal_window: u64, patch_lifetime: u64) -> u64 {
    if n_patches == 0 || patch_lifetime == 0 {
        return 0;
    }
    let (r, p) = (removal_window, patch_lifetime);
    let m = (p - 1).min(r);
    n_patches * ((r + 1) * p + m * (2 * (r + 1) - 1 - m) / 2)
}

/// Edges owned by one patch of age `age` in a warmed-up graph.
pub fn edges_per_patch(age: u64, patch_lifetime: u64) -> u64 {
    if patch_lifetime == 0 {
        return 0;
    }
    patch_lifetime + age.min(patch_lifetime - 1)
}

#[derive(Debug, Clone)]
pub struct PatchGraph {
    removal_window: u64,
    patch_lifetime: u64,
    frames: VecDeque<RetainedFrame>,
    patches: Vec<Patch>,
    /// Sorted by `(patch_id, target_frame_id)`.
    edges: Vec<Edge>,
    current_frame_id: Option<u64>,
    next_patch_id: u64,
    next_edge_id: u64,
}

impl PatchGraph {
    pub fn new(removal_window: usize, patch_lifetime: usize) -> Self {
        Self {
            removal_window: removal_window as u64,
            patch_lifetime: patch_lifetime as u64,
            frames: VecDeque::new(),
            patches: Vec::new(),
            edges: Vec::new(),
            current_frame_id: None,
            next_patch_id: 0,
            next_edge_id: 0,
        }
    }

    pub fn from_config(cfg: &ModelConfig) -> Self {
        Self::new(cfg.removal_window, cfg.patch_lifetime)
    }

    pub fn current_frame_id(&self) -> Option<u64> {
        self.current_frame_id
    }

    /// Id the next inserted patch will receive.
    pub fn next_patch_id(&self) -> u64 {
        self.next_patch_id
    }

    pub fn patches(&self) -> &[Patch] {
        &self.patches
    }

    pub fn patches_mut(&mut self) -> &mut [Patch] {
        &mut self.patches
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn edges_mut(&mut self) -> &mut [Edge] {
        &mut self.edges
    }

    pub fn frames(&self) -> impl Iterator<Item = &RetainedFrame> {
        self.frames.iter()
    }

    pub fn n_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn frame(&self, frame_id: u64) -> Option<&RetainedFrame> {
        let first = self.frames.front()?.frame_id;
        let idx = frame_id.checked_sub(first)? as usize;
        self.frames.get(idx)
    }

    pub fn patch_index(&self, patch_id: u64) -> Option<usize> {
        self.patches.binary_search_by_key(&patch_id, |p| p.id).ok()
    }

    pub fn patch(&self, patch_id: u64) -> Option<&Patch> {
        self.patch_index(patch_id).map(|i| &self.patches[i])
    }

    pub fn retained_feature_bytes(&self) -> usize {
        self.frames.iter().map(RetainedFrame::payload_bytes).sum()
    }

    /// Insert frame `fs.frame_id` with its sampled patches and create the
    /// edges reaching within the patch lifetime.
    pub fn add_frame(&mut self, fs: FeatureSet, patches: Vec<Patch>) -> Result<()> {
        let n = fs.frame_id;
        if let Some(cur) = self.current_frame_id {
            if n != cur + 1 {
                return Err(Error::Sequencing {
                    expected: cur + 1,
                    got: n,
                });
            }
        }
        self.current_frame_id = Some(n);
        self.frames.push_back(RetainedFrame {
            frame_id: n,
            mf: fs.mf,
            pyr: fs.pyr,
        });
        let span = self.patch_lifetime.saturating_sub(1);
        let mut new_edges = Vec::new();

        if self.patch_lifetime > 0 {
            for p in &self.patches {
                if n - p.frame_id <= span {
                    new_edges.push((p.id, n, p.context.len()));
                }
            }
        }

        let first_frame = self.frames.front().map_or(n, |f| f.frame_id);
        for mut p in patches {
            p.id = self.next_patch_id;
            p.frame_id = n;
            self.next_patch_id += 1;
            if self.patch_lifetime > 0 {
                for j in n.saturating_sub(span).max(first_frame)..=n {
                    new_edges.push((p.id, j, p.context.len()));
                }
            }
            self.patches.push(p);
        }

        for (patch_id, target, dim) in new_edges {
            self.edges.push(Edge {
                id: self.next_edge_id,
                patch_id,
                target_frame_id: target,
                hidden: vec![0.0; dim],
                last_flow: [0.0; 2],
                target: None,
                confidence: 0.0,
            });
            self.next_edge_id += 1;
        }
        self.edges.sort_by_key(|e| (e.patch_id, e.target_frame_id));
        Ok(())
    }

    /// Drop patches older than the removal window and frames older than
    /// `R_w + P_LT`, together with their edges.
    pub fn remove_expired(&mut self) -> Removed {
        let Some(n) = self.current_frame_id else {
            return Removed::default();
        };
        let before = (self.patches.len(), self.edges.len(), self.frames.len());
        let rw = self.removal_window;
        self.patches.retain(|p| n - p.frame_id <= rw);
        let keep_frames = rw + self.patch_lifetime;
        while let Some(f) = self.frames.front() {
            if n - f.frame_id >= keep_frames {
                self.frames.pop_front();
            } else {
                break;
            }
        }
        let first = self.frames.front().map_or(n, |f| f.frame_id);
        let patches = &self.patches;
        self.edges.retain(|e| {
            e.target_frame_id >= first && patches.binary_search_by_key(&e.patch_id, |p| p.id).is_ok()
        });
        Removed {
            patches: before.0 - self.patches.len(),
            edges: before.1 - self.edges.len(),
            frames: before.2 - self.frames.len(),
        }
    }

    /// Remove cross-frame edges whose reprojected displacement under `poses`
    /// is strictly below `threshold` feature pixels.
    pub fn prune_static_edges(
        &mut self,
        poses: &BTreeMap<u64, Pose>,
        intrinsics: &Intrinsics,
        threshold: f64,
    ) -> usize {
        let before = self.edges.len();
        let patches = &self.patches;
        self.edges.retain(|e| {
            let Ok(pi) = patches.binary_search_by_key(&e.patch_id, |p| p.id) else {
                return true;
            };
            let p = &patches[pi];
            if p.frame_id == e.target_frame_id {
                return true;
            }
            let (Some(ti), Some(tj)) = (poses.get(&p.frame_id), poses.get(&e.target_frame_id)) else {
                return true;
            };
            match reproject(p.center, p.inv_depth, ti, tj, intrinsics) {
                Some(uv) => {
                    let d = ((uv[0] - p.center[0]).powi(2) + (uv[1] - p.center[1]).powi(2)).sqrt();
                    d >= threshold
                }
                None => true,
            }
        });
        before - self.edges.len()
    }

    /// Text adjacency listing: `edge_id patch_id patch_frame target_frame`.
    pub fn adjacency_listing(&self) -> String {
        let mut s = String::new();
        for e in &self.edges {
            let pf = self.patch(e.patch_id).map_or(u64::MAX, |p| p.frame_id);
            let _ = writeln!(s, "{} {} {} {}", e.id, e.patch_id, pf, e.target_frame_id);
        }
        s
    }

    /// Median inverse depth over live patches, 1.0 for an empty graph.
    pub fn median_inv_depth(&self) -> f64 {
        let mut d: Vec<f64> = self.patches.iter().map(|p| p.inv_depth).collect();
        if d.is_empty() {
            return 1.0;
        }
        d.sort_by(f64::total_cmp);
        let m = d.len() / 2;
        if d.len() % 2 == 1 {
            d[m]
        } else {
            0.5 * (d[m - 1] + d[m])
        }
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use nalgebra::Isometry3;

    pub(crate) fn dummy_features(frame_id: u64) -> FeatureSet {
        FeatureSet {
            frame_id,
            mf: FeatureMap::zeros(1, 1, 1),
            cf: FeatureMap::zeros(1, 1, 1),
            pyr: None,
            density: vec![0.0],
            valid: (1, 1),
        }
    }

    pub(crate) fn dummy_patches(n: usize, center: [f64; 2]) -> Vec<Patch> {
        (0..n)
            .map(|_| Patch {
                id: 0,
                frame_id: 0,
                center,
                feature: Vec::new(),
                context: vec![0.0; 2],
                inv_depth: 1.0,
            })
            .collect()
    }

    fn simulate(n: usize, rw: usize, plt: usize, frames: u64) -> PatchGraph {
        let mut g = PatchGraph::new(rw, plt);
        for f in 0..frames {
            g.add_frame(dummy_features(f), dummy_patches(n, [1.0, 1.0])).unwrap();
            g.remove_expired();
        }
        g
    }

    #[test]
    fn closed_form_values() {
        assert_eq!(n_edges(96, 22, 13), 47712);
        assert_eq!(n_edges(0, 22, 13), 0);
        assert_eq!(n_edges(96, 22, 10), 37632);
        assert_eq!(n_edges(24, 12, 10), 4848);
    }

    #[test]
    fn closed_form_equals_per_patch_sum() {
        for r in 0..30u64 {
            for p in 1..20u64 {
                let s: u64 = (0..=r).map(|a| edges_per_patch(a, p)).sum();
                assert_eq!(n_edges(1, r, p), s, "r={r} p={p}");
            }
        }
    }

    #[test]
    fn first_frame_has_self_edges_only() {
        let g = simulate(24, 12, 10, 1);
        assert_eq!(g.edges().len(), 24);
        assert!(g.edges().iter().all(|e| e.target_frame_id == 0));
    }

    #[test]
    fn warmed_graph_matches_closed_form() {
        let g = simulate(24, 12, 10, 12 + 10 + 1);
        assert_eq!(g.edges().len() as u64, 4848);
        assert!(g.n_frames() <= 22);
    }

    #[test]
    fn steady_state_removes_one_frame_of_patches() {
        let mut g = simulate(24, 12, 10, 40);
        g.add_frame(dummy_features(40), dummy_patches(24, [1.0, 1.0])).unwrap();
        let r = g.remove_expired();
        assert_eq!(r.patches, 24);
        assert_eq!(g.edges().len() as u64, 4848);
    }

    #[test]
    fn young_graph_removes_nothing() {
        let mut g = PatchGraph::new(12, 10);
        for f in 0..5 {
            g.add_frame(dummy_features(f), dummy_patches(3, [1.0, 1.0])).unwrap();
            assert_eq!(g.remove_expired(), Removed::default());
        }
    }

    #[test]
    fn sequencing_enforced() {
        let mut g = PatchGraph::new(3, 2);
        g.add_frame(dummy_features(0), dummy_patches(1, [1.0, 1.0])).unwrap();
        let err = g.add_frame(dummy_features(0), dummy_patches(1, [1.0, 1.0])).unwrap_err();
        assert!(matches!(err, Error::Sequencing { expected: 1, got: 0 }));
    }

    #[test]
    fn edges_sorted_and_unique() {
        let g = simulate(5, 4, 3, 12);
        let keys: Vec<_> = g.edges().iter().map(|e| (e.patch_id, e.target_frame_id)).collect();
        let mut sorted = keys.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(keys, sorted);
    }

    #[test]
    fn identity_poses_prune_all_cross_edges() {
        let mut g = simulate(4, 5, 4, 8);
        let k = Intrinsics::new(10.0, 10.0, 5.0, 5.0);
        let poses: BTreeMap<u64, Pose> = (0..8).map(|f| (f, Pose::identity())).collect();
        let mut g0 = g.clone();
        assert_eq!(g0.prune_static_edges(&poses, &k, 0.0), 0);
        let removed = g.prune_static_edges(&poses, &k, 1e-9);
        assert!(removed > 0);
        assert!(g.edges().iter().all(|e| g.patch(e.patch_id).unwrap().frame_id == e.target_frame_id));
        assert_eq!(g.prune_static_edges(&poses, &k, 1e-9), 0);
    }

    #[test]
    fn translating_camera_keeps_edges_above_threshold() {
        // sideways motion 0.1 per frame, depth 1, fx 10 -> 1 px per frame of baseline
        let mut g = simulate(4, 5, 4, 8);
        let k = Intrinsics::new(10.0, 10.0, 5.0, 5.0);
        let poses: BTreeMap<u64, Pose> =
            (0..8).map(|f| (f, Isometry3::translation(-0.1 * f as f64, 0.0, 0.0))).collect();
        assert_eq!(g.prune_static_edges(&poses, &k, 0.99), 0);
    }

    #[test]
    fn listing_has_one_line_per_edge() {
        let g = simulate(2, 2, 2, 4);
        assert_eq!(g.adjacency_listing().lines().count(), g.edges().len());
    }
}
