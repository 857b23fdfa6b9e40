use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::trajectory::Trajectory;
use crate::ba::{ba_solve, BaOptions, BaProblem, BaTerm};
use crate::correlation::correlate_edges;
use crate::costsweep::{EDGE_META_BYTES, PATCH_META_BYTES, UPDATE_WORKSPACE_ROWS};
use crate::error::{Error, Result};
use crate::events::EventVoxelGrid;
use crate::geometry::{reproject, Intrinsics, Pose};
use crate::graph::{PatchGraph, DEFAULT_PRUNE_THRESHOLD};
use crate::model::{ModelConfig, WeightStore};
use crate::nn::{Mat, OpCounter};
use crate::patchifier::{sample_patches, FeatureSet, Patchifier, SamplingStrategy};
use crate::update::{UpdateBatch, UpdateOperator};

#[derive(Debug, Clone, PartialEq)]
pub struct TrackerOptions {
    /// Pixel intrinsics of the sensor.
    pub intrinsics: Intrinsics,
    pub sampling: SamplingStrategy,
    pub seed: u64,
    /// Remove cross-frame edges with less displacement than this many feature
    /// pixels after pose initialization. `None` disables pruning.
    pub prune_threshold: Option<f64>,
}

impl TrackerOptions {
    pub fn for_config(cfg: &ModelConfig) -> Self {
        Self {
            intrinsics: Intrinsics::default_for(cfg.width, cfg.height),
            sampling: SamplingStrategy::EventDensity,
            seed: 0,
            prune_threshold: None,
        }
    }

    pub fn with_pruning(mut self) -> Self {
        self.prune_threshold = Some(DEFAULT_PRUNE_THRESHOLD);
        self
    }
}

/// Multiply-accumulates per block.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockMacs {
    pub patchifier: u64,
    pub correlation: u64,
    pub update: u64,
    pub ba: u64,
}

impl BlockMacs {
    pub fn total(&self) -> u64 {
        self.patchifier + self.correlation + self.update + self.ba
    }

    fn add(&mut self, o: &BlockMacs) {
        self.patchifier += o.patchifier;
        self.correlation += o.correlation;
        self.update += o.update;
        self.ba += o.ba;
    }
}

/// Wall-clock seconds per block.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct BlockTimes {
    pub patchifier: f64,
    pub correlation: f64,
    pub update: f64,
    pub ba: f64,
}

impl BlockTimes {
    fn add(&mut self, o: &BlockTimes) {
        self.patchifier += o.patchifier;
        self.correlation += o.correlation;
        self.update += o.update;
        self.ba += o.ba;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameStats {
    pub frame_id: u64,
    /// Live edges processed by the update operator.
    pub live_edges: usize,
    pub pruned_edges: usize,
    pub macs: BlockMacs,
    pub e_sigma: u64,
    pub memory_bytes: usize,
    pub seconds: BlockTimes,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    pub frames: usize,
    pub macs: BlockMacs,
    pub e_sigma: u64,
    pub peak_memory_bytes: usize,
    pub seconds: BlockTimes,
    pub per_frame: Vec<FrameStats>,
}

/// Stateful per-frame visual odometry front end and back end.
pub struct Tracker<'a> {
    cfg: &'a ModelConfig,
    opts: TrackerOptions,
    k_feat: Intrinsics,
    weight_bytes: usize,
    patchifier: Patchifier<'a>,
    update: UpdateOperator<'a>,
    graph: PatchGraph,
    /// World-to-camera pose per frame id.
    poses: BTreeMap<u64, Pose>,
    stamps: Vec<f64>,
    next_frame: u64,
    stats: RunStats,
}

impl<'a> Tracker<'a> {
    pub fn new(weights: &'a WeightStore, cfg: &'a ModelConfig, opts: TrackerOptions) -> Result<Self> {
        cfg.validate()?;
        weights.validate(cfg)?;
        Ok(Self {
            cfg,
            k_feat: opts.intrinsics.scaled(4.0),
            opts,
            weight_bytes: weights.payload_bytes(),
            patchifier: Patchifier::new(weights, cfg)?,
            update: UpdateOperator::new(weights, cfg)?,
            graph: PatchGraph::from_config(cfg),
            poses: BTreeMap::new(),
            stamps: Vec::new(),
            next_frame: 0,
            stats: RunStats::default(),
        })
    }

    pub fn graph(&self) -> &PatchGraph {
        &self.graph
    }

    pub fn poses(&self) -> &BTreeMap<u64, Pose> {
        &self.poses
    }

    pub fn stats(&self) -> &RunStats {
        &self.stats
    }

    pub fn feature_intrinsics(&self) -> &Intrinsics {
        &self.k_feat
    }

    fn patch_bytes(&self) -> usize {
        let per = (9 * self.cfg.ch_mf + self.cfg.ch_cf) * 4 + PATCH_META_BYTES;
        self.graph.patches().len() * per
    }

    fn edge_bytes(&self) -> usize {
        self.graph.edges().len() * (self.cfg.hidden_dim() * 4 + EDGE_META_BYTES)
    }

    fn graph_bytes(&self) -> usize {
        self.graph.retained_feature_bytes() + self.patch_bytes() + self.edge_bytes()
    }

    fn init_pose(&self, n: u64) -> Pose {
        if n < 2 {
            return Pose::identity();
        }
        let a = &self.poses[&(n - 1)];
        let b = &self.poses[&(n - 2)];
        (a * b.inverse()) * a
    }

    /// Extract, sample and insert a frame, then expire and optionally prune.
    fn ingest(&mut self, evg: &EventVoxelGrid, f: &mut FrameStats) -> Result<()> {
        let n = self.next_frame;
        let t0 = Instant::now();
        let mut ctr = OpCounter::default();
        let (mut fs, ws): (FeatureSet, usize) = self.patchifier.extract(evg, &mut ctr)?;
        f.macs.patchifier = ctr.macs;
        f.seconds.patchifier = t0.elapsed().as_secs_f64();
        fs.frame_id = n;
        let cf_bytes = fs.cf.payload_bytes();
        f.memory_bytes = f
            .memory_bytes
            .max(self.weight_bytes + self.graph_bytes() + ws + cf_bytes + fs.mf.payload_bytes());

        let mut patches = sample_patches(&fs, self.cfg, self.opts.sampling, self.opts.seed)?;
        let d0 = self.graph.median_inv_depth();
        for p in &mut patches {
            p.inv_depth = d0;
        }
        let pose = self.init_pose(n);
        self.poses.insert(n, pose);
        let stamp = evg.timestamp_s();
        if let Some(&last) = self.stamps.last() {
            if stamp <= last {
                return Err(Error::Validation(format!(
                    "voxel grid timestamps must increase: {stamp} after {last}"
                )));
            }
        }
        self.stamps.push(stamp);
        self.graph.add_frame(fs, patches)?;
        self.next_frame += 1;
        f.memory_bytes = f.memory_bytes.max(self.weight_bytes + self.graph_bytes() + cf_bytes);

        self.graph.remove_expired();
        if let Some(th) = self.opts.prune_threshold {
            f.pruned_edges = self.graph.prune_static_edges(&self.poses, &self.k_feat, th);
        }
        Ok(())
    }

    /// Insert a frame without running the update operator or bundle
    /// adjustment; poses follow the constant-velocity model.
    pub fn insert_frame(&mut self, evg: &EventVoxelGrid) -> Result<()> {
        let n = self.next_frame;
        let mut f = self.blank_stats(n);
        self.ingest(evg, &mut f).map_err(|e| e.at_frame(n))
    }

    fn blank_stats(&self, n: u64) -> FrameStats {
        FrameStats {
            frame_id: n,
            live_edges: 0,
            pruned_edges: 0,
            macs: BlockMacs::default(),
            e_sigma: 0,
            memory_bytes: 0,
            seconds: BlockTimes::default(),
        }
    }

    /// Process one voxel grid and return its statistics.
    pub fn step(&mut self, evg: &EventVoxelGrid) -> Result<FrameStats> {
        let n = self.next_frame;
        self.step_inner(evg).map_err(|e| e.at_frame(n))
    }

    fn step_inner(&mut self, evg: &EventVoxelGrid) -> Result<FrameStats> {
        let n = self.next_frame;
        let mut f = self.blank_stats(n);
        self.ingest(evg, &mut f)?;
        for _ in 0..self.cfg.update_iters {
            self.update_pass(&mut f)?;
        }
        if self.poses.len() >= self.cfg.opt_window {
            self.bundle_adjust(&mut f)?;
        }
        self.stats.frames += 1;
        self.stats.macs.add(&f.macs);
        self.stats.e_sigma += f.e_sigma;
        self.stats.seconds.add(&f.seconds);
        self.stats.peak_memory_bytes = self.stats.peak_memory_bytes.max(f.memory_bytes);
        self.stats.per_frame.push(f.clone());
        Ok(f)
    }

    fn edge_centers(&self) -> Vec<Option<[f64; 2]>> {
        self.graph
            .edges()
            .iter()
            .map(|e| {
                let p = self.graph.patch(e.patch_id)?;
                reproject(
                    p.center,
                    p.inv_depth,
                    &self.poses[&p.frame_id],
                    &self.poses[&e.target_frame_id],
                    &self.k_feat,
                )
            })
            .collect()
    }

    fn update_pass(&mut self, f: &mut FrameStats) -> Result<()> {
        let t0 = Instant::now();
        let centers = self.edge_centers();
        let mut ctr = OpCounter::default();
        let corr = correlate_edges(&self.graph, &centers, self.cfg, &mut ctr);
        f.macs.correlation += ctr.macs;
        f.seconds.correlation += t0.elapsed().as_secs_f64();

        let t1 = Instant::now();
        let d = self.cfg.hidden_dim();
        let edges = self.graph.edges();
        let e = edges.len();
        let mut hidden = Mat::zeros(e, d);
        let mut context = Mat::zeros(e, d);
        for (i, edge) in edges.iter().enumerate() {
            hidden.row_mut(i).copy_from_slice(&edge.hidden);
            let p = self.graph.patch(edge.patch_id).expect("live edge has a live patch");
            context.row_mut(i).copy_from_slice(&p.context);
        }
        let batch = UpdateBatch {
            hidden,
            corr,
            context,
            patch: edges.iter().map(|e| e.patch_id).collect(),
            frame: edges.iter().map(|e| e.target_frame_id).collect(),
        };
        let ws = batch.corr.payload_bytes() + UPDATE_WORKSPACE_ROWS * batch.hidden.payload_bytes();
        f.memory_bytes = f.memory_bytes.max(self.weight_bytes + self.graph_bytes() + ws);
        let mut ctr = OpCounter::default();
        let out = self.update.forward(&batch, &mut ctr)?;
        f.macs.update += ctr.macs;
        f.e_sigma += ctr.softmax_elements;
        f.live_edges = e;

        for (i, edge) in self.graph.edges_mut().iter_mut().enumerate() {
            edge.hidden.copy_from_slice(out.hidden.row(i));
            let fl = [out.flow[i][0] as f64, out.flow[i][1] as f64];
            edge.last_flow = fl;
            edge.confidence = out.confidence[i] as f64;
            edge.target = centers[i].map(|c| [c[0] + fl[0], c[1] + fl[1]]);
        }
        f.seconds.update += t1.elapsed().as_secs_f64();
        Ok(())
    }

    fn bundle_adjust(&mut self, f: &mut FrameStats) -> Result<()> {
        let t0 = Instant::now();
        let patches = self.graph.patches();
        let first = self.graph.frames().next().map_or(0, |fr| fr.frame_id);
        let mut terms = Vec::new();
        for e in self.graph.edges() {
            let (Some(target), Some(pi)) = (e.target, self.graph.patch_index(e.patch_id)) else {
                continue;
            };
            let p = &patches[pi];
            terms.push(BaTerm {
                patch: pi,
                frame_i: p.frame_id,
                frame_j: e.target_frame_id,
                center: p.center,
                target,
                weight: e.confidence,
            });
        }
        if terms.is_empty() {
            return Ok(());
        }
        let poses: BTreeMap<u64, Pose> = self.poses.range(first..).map(|(&k, v)| (k, *v)).collect();
        let n = self.next_frame - 1;
        let w = self.cfg.opt_window as u64;
        let free_frames: Vec<u64> = ((n + 2).saturating_sub(w)..=n).filter(|k| poses.contains_key(k)).collect();
        let problem = BaProblem {
            intrinsics: self.k_feat,
            poses,
            free_frames,
            inv_depths: patches.iter().map(|p| p.inv_depth).collect(),
            terms,
        };
        let np = 6 * problem.free_frames.len();
        let nd = problem.inv_depths.len();
        let ba_ws = (np * np + np * nd + 3 * nd) * 8;
        f.memory_bytes = f.memory_bytes.max(self.weight_bytes + self.graph_bytes() + ba_ws);
        let opts = BaOptions {
            iterations: self.cfg.ba_iters,
            ..BaOptions::default()
        };
        let mut ctr = OpCounter::default();
        let report = ba_solve(&problem, &opts, &mut ctr)?;
        f.macs.ba += ctr.macs;
        for (k, p) in report.poses {
            self.poses.insert(k, p);
        }
        for (p, d) in self.graph.patches_mut().iter_mut().zip(report.inv_depths) {
            p.inv_depth = d;
        }
        f.seconds.ba += t0.elapsed().as_secs_f64();
        Ok(())
    }

    /// Camera-to-world trajectory, one pose per processed frame.
    pub fn trajectory(&self) -> Trajectory {
        let poses = self.poses.values().map(|p| p.inverse()).collect();
        Trajectory::from_parts(self.stamps.clone(), poses).expect("stamps validated on insert")
    }

    pub fn into_results(self) -> (Trajectory, RunStats) {
        let traj = self.trajectory();
        (traj, self.stats)
    }
}

/// Run the full pipeline over a sequence of voxel grids.
pub fn run(
    grids: &[EventVoxelGrid],
    weights: &WeightStore,
    cfg: &ModelConfig,
    opts: TrackerOptions,
) -> Result<(Trajectory, RunStats)> {
    let mut tracker = Tracker::new(weights, cfg, opts)?;
    for g in grids {
        tracker.step(g)?;
    }
    Ok(tracker.into_results())
}
