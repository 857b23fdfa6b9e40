//! Geometry-only tracking: the update operator is replaced by flow targets
//! computed from the synthetic ground truth, so only graph bookkeeping,
//! pose initialization and bundle adjustment are exercised.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::synthetic::SyntheticScene;
use super::trajectory::Trajectory;
use crate::ba::{ba_solve, BaOptions, BaProblem, BaTerm};
use crate::error::Result;
use crate::geometry::Pose;
use crate::graph::{Patch, PatchGraph};
use crate::model::ModelConfig;
use crate::nn::OpCounter;
use crate::patchifier::{FeatureMap, FeatureSet};

#[derive(Debug, Clone, PartialEq)]
pub struct OracleOptions {
    /// Standard deviation of Gaussian noise added to every cross-frame
    /// target, in feature pixels.
    pub flow_noise_px: f64,
    /// Fraction of edges whose confidence is set to zero.
    pub zero_confidence_fraction: f64,
    pub ba_iterations: usize,
    pub seed: u64,
}

impl Default for OracleOptions {
    fn default() -> Self {
        Self {
            flow_noise_px: 0.0,
            zero_confidence_fraction: 0.0,
            ba_iterations: 8,
            seed: 0,
        }
    }
}

/// Track a synthetic scene with exact (optionally noisy) flow targets.
///
/// Graph sizes and the optimization window come from `cfg`. Unlike the
/// learned pipeline, bundle adjustment runs from the second frame on.
pub fn bypass_with_oracle_flow(scene: &SyntheticScene, cfg: &ModelConfig, opts: &OracleOptions) -> Result<Trajectory> {
    let k_feat = scene.intrinsics.scaled(4.0);
    let gt = scene.gt_poses();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut graph = PatchGraph::from_config(cfg);
    let mut landmark_of: BTreeMap<u64, usize> = BTreeMap::new();
    // noise draws and confidence masks are fixed per edge id so runs with
    // different noise levels see the same standard-normal samples
    let mut noise: BTreeMap<u64, ([f64; 2], bool)> = BTreeMap::new();
    let mut poses: BTreeMap<u64, Pose> = BTreeMap::new();
    let (fw, fh) = (scene.spec.width as f64 / 4.0, scene.spec.height as f64 / 4.0);

    for (n, gt_n) in gt.iter().enumerate() {
        let n = n as u64;
        let mut visible: Vec<(usize, [f64; 2], f64)> = Vec::new();
        for l in 0..scene.landmarks.len() {
            if let Some(uv) = scene.project(gt_n, l) {
                let c = [uv[0] / 4.0, uv[1] / 4.0];
                if c[0] >= 1.0 && c[1] >= 1.0 && c[0] <= fw - 2.0 && c[1] <= fh - 2.0 {
                    let z = gt_n.transform_point(&scene.landmarks[l]).z;
                    visible.push((l, c, 1.0 / z));
                }
            }
        }
        let take = cfg.n_patches.min(visible.len());
        let mut chosen = sample(&mut rng, visible.len(), take).into_vec();
        chosen.sort_unstable();
        let d0 = graph.median_inv_depth();
        let first_id = graph.next_patch_id();
        let patches: Vec<Patch> = chosen
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                landmark_of.insert(first_id + i as u64, visible[v].0);
                Patch {
                    id: 0,
                    frame_id: n,
                    center: visible[v].1,
                    feature: Vec::new(),
                    context: Vec::new(),
                    inv_depth: d0,
                }
            })
            .collect();

        let init = if n < 2 {
            Pose::identity()
        } else {
            let a = &poses[&(n - 1)];
            let b = &poses[&(n - 2)];
            (a * b.inverse()) * a
        };
        poses.insert(n, init);
        let fs = FeatureSet {
            frame_id: n,
            mf: FeatureMap::zeros(1, 1, 0),
            cf: FeatureMap::zeros(1, 1, 0),
            pyr: None,
            density: Vec::new(),
            valid: (0, 0),
        };
        graph.add_frame(fs, patches)?;
        graph.remove_expired();
        if n == 0 {
            continue;
        }

        let first_frame = graph.frames().next().map_or(0, |f| f.frame_id);
        let mut terms = Vec::new();
        for e in graph.edges() {
            let Some(pi) = graph.patch_index(e.patch_id) else { continue };
            let p = &graph.patches()[pi];
            let l = landmark_of[&e.patch_id];
            let Some(uv) = scene.intrinsics.project(&gt[e.target_frame_id as usize].transform_point(&scene.landmarks[l]).coords) else {
                continue;
            };
            let (z, masked) = *noise.entry(e.id).or_insert_with(|| {
                let z = [rng.sample(StandardNormal), rng.sample(StandardNormal)];
                (z, rng.random_bool(opts.zero_confidence_fraction.clamp(0.0, 1.0)))
            });
            let s = if e.target_frame_id == p.frame_id { 0.0 } else { opts.flow_noise_px };
            terms.push(BaTerm {
                patch: pi,
                frame_i: p.frame_id,
                frame_j: e.target_frame_id,
                center: p.center,
                target: [uv[0] / 4.0 + s * z[0], uv[1] / 4.0 + s * z[1]],
                weight: if masked { 0.0 } else { 1.0 },
            });
        }
        let w = cfg.opt_window as u64;
        let free_frames: Vec<u64> = ((n + 2).saturating_sub(w).max(1)..=n).collect();
        let problem = BaProblem {
            intrinsics: k_feat,
            poses: poses.range(first_frame..).map(|(&k, v)| (k, *v)).collect(),
            free_frames,
            inv_depths: graph.patches().iter().map(|p| p.inv_depth).collect(),
            terms,
        };
        let report = ba_solve(
            &problem,
            &BaOptions {
                iterations: opts.ba_iterations,
                ..BaOptions::default()
            },
            &mut OpCounter::default(),
        )?;
        poses.extend(report.poses);
        for (p, d) in graph.patches_mut().iter_mut().zip(report.inv_depths) {
            p.inv_depth = d;
        }
    }

    let stamps = scene.ground_truth().stamps().to_vec();
    Trajectory::from_parts(stamps, poses.values().map(|p| p.inverse()).collect())
}
