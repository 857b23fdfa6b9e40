use serde::{Deserialize, Serialize};

use crate::ba::ba_iteration_macs;
use crate::correlation::corr_macs_per_edge;
use crate::error::Result;
use crate::graph::{edges_per_patch, n_edges};
use crate::model::{parameter_count, ModelConfig};
use crate::patchifier::patchifier_macs;
use crate::pipeline::BlockMacs;
use crate::update::{update_e_sigma, update_macs_per_edge};

/// Bookkeeping bytes stored per patch besides its feature vectors.
pub const PATCH_META_BYTES: usize = 40;
/// Bookkeeping bytes stored per edge besides its hidden state.
pub const EDGE_META_BYTES: usize = 48;
/// Per-edge activations of width `D` live at once inside the update operator.
pub const UPDATE_WORKSPACE_ROWS: usize = 6;

/// Peak resident bytes by component.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryBreakdown {
    pub weights: usize,
    /// Retained matching-feature maps and their PYR levels.
    pub feature_maps: usize,
    pub context_map: usize,
    pub patches: usize,
    pub edges: usize,
    pub update_workspace: usize,
    pub ba_workspace: usize,
}

impl MemoryBreakdown {
    pub fn total(&self) -> usize {
        self.weights
            + self.feature_maps
            + self.context_map
            + self.patches
            + self.edges
            + self.update_workspace
            + self.ba_workspace
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub config: ModelConfig,
    pub n_edges: u64,
    pub macs: BlockMacs,
    pub macs_per_frame: u64,
    pub e_sigma: u64,
    pub memory: MemoryBreakdown,
    pub peak_memory_bytes: usize,
}

/// Edge count of a warmed graph.
pub fn graph_edges(cfg: &ModelConfig) -> u64 {
    n_edges(cfg.n_patches as u64, cfg.removal_window as u64, cfg.patch_lifetime as u64)
}

fn free_poses(cfg: &ModelConfig) -> u64 {
    (cfg.opt_window.min(cfg.removal_window + cfg.patch_lifetime) as u64).saturating_sub(1)
}

/// Bundle-adjustment MACs per frame on a warmed graph.
pub fn ba_macs(cfg: &ModelConfig) -> u64 {
    let e = graph_edges(cfg);
    if e == 0 {
        return 0;
    }
    let ks = (0..=cfg.removal_window).flat_map(|a| {
        let k = edges_per_patch(a as u64, cfg.patch_lifetime as u64);
        std::iter::repeat_n(k, cfg.n_patches)
    });
    cfg.ba_iters as u64 * ba_iteration_macs(e, ks, free_poses(cfg))
}

/// Steady-state MACs per frame by block.
pub fn macs_per_frame(cfg: &ModelConfig) -> BlockMacs {
    let e = graph_edges(cfg);
    let it = cfg.update_iters as u64;
    BlockMacs {
        patchifier: patchifier_macs(cfg),
        correlation: it * e * corr_macs_per_edge(cfg),
        update: it * e * update_macs_per_edge(cfg),
        ba: ba_macs(cfg),
    }
}

/// Softmax elements evaluated per frame on a warmed graph.
pub fn e_sigma_count(cfg: &ModelConfig) -> u64 {
    let e = graph_edges(cfg);
    cfg.update_iters as u64 * update_e_sigma(cfg, e)
}

/// Peak memory model. Feature maps are counted on padded dimensions for
/// every frame retained just before expiry.
pub fn peak_memory(cfg: &ModelConfig) -> MemoryBreakdown {
    let e = graph_edges(cfg) as usize;
    let d = cfg.hidden_dim();
    let (fw, fh) = cfg.feature_dims();
    let (pw, ph) = cfg.pyr_dims();
    let frames = cfg.removal_window + cfg.patch_lifetime + 1;
    let pyr = if cfg.use_pyr { pw * ph * cfg.ch_mf } else { 0 };
    let f = 6 * free_poses(cfg) as usize;
    let m = cfg.n_patches * (cfg.removal_window + 1);
    MemoryBreakdown {
        weights: parameter_count(cfg) * 4,
        feature_maps: frames * (fw * fh * cfg.ch_mf + pyr) * 4,
        context_map: fw * fh * cfg.ch_cf * 4,
        patches: cfg.n_patches * (cfg.removal_window + 2) * ((9 * cfg.ch_mf + cfg.ch_cf) * 4 + PATCH_META_BYTES),
        edges: e * (4 * d + EDGE_META_BYTES),
        update_workspace: e * 4 * (cfg.corr_len() + UPDATE_WORKSPACE_ROWS * d),
        ba_workspace: if e == 0 { 0 } else { (f * f + f * m + 3 * m) * 8 },
    }
}

pub fn cost_report(cfg: &ModelConfig) -> Result<CostReport> {
    cfg.validate_for_cost()?;
    let macs = macs_per_frame(cfg);
    let memory = peak_memory(cfg);
    Ok(CostReport {
        config: cfg.clone(),
        n_edges: graph_edges(cfg),
        macs_per_frame: macs.total(),
        macs,
        e_sigma: e_sigma_count(cfg),
        peak_memory_bytes: memory.total(),
        memory,
    })
}

impl CostReport {
    pub fn to_table(&self) -> String {
        let m = &self.macs;
        let b = &self.memory;
        let mb = |x: usize| x as f64 / 1e6;
        format!(
            "edges                {}\n\
             softmax elements     {}\n\
             MACs / frame         {:.4} G\n\
             \x20 patchifier         {:.4} G\n\
             \x20 correlation        {:.4} G\n\
             \x20 update             {:.4} G\n\
             \x20 bundle adjustment  {:.4} G\n\
             peak memory          {:.3} MB\n\
             \x20 weights            {:.3} MB\n\
             \x20 feature maps       {:.3} MB\n\
             \x20 context map        {:.3} MB\n\
             \x20 patches            {:.3} MB\n\
             \x20 edges              {:.3} MB\n\
             \x20 update workspace   {:.3} MB\n\
             \x20 BA workspace       {:.3} MB\n",
            self.n_edges,
            self.e_sigma,
            self.macs_per_frame as f64 / 1e9,
            m.patchifier as f64 / 1e9,
            m.correlation as f64 / 1e9,
            m.update as f64 / 1e9,
            m.ba as f64 / 1e9,
            mb(self.peak_memory_bytes),
            mb(b.weights),
            mb(b.feature_maps),
            mb(b.context_map),
            mb(b.patches),
            mb(b.edges),
            mb(b.update_workspace),
            mb(b.ba_workspace),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_graph_has_no_edge_costs() {
        let cfg = ModelConfig::tiny().with_graph(0, 12, 10);
        let r = cost_report(&cfg).unwrap();
        assert_eq!(r.n_edges, 0);
        assert_eq!(r.macs.correlation + r.macs.update + r.macs.ba, 0);
        assert_eq!(r.e_sigma, 0);
        assert_eq!(r.memory.edges + r.memory.update_workspace + r.memory.ba_workspace, 0);
        assert!(r.macs.patchifier > 0);
    }

    #[test]
    fn invalid_config_is_rejected() {
        let mut cfg = ModelConfig::tiny();
        cfg.ch_mf = 0;
        assert!(cost_report(&cfg).is_err());
    }

    #[test]
    fn softmax_counts() {
        assert_eq!(e_sigma_count(&ModelConfig::baseline()), 36_642_816);
        assert_eq!(e_sigma_count(&ModelConfig::tiny()), 930_816);
        let mut no_sa = ModelConfig::baseline();
        no_sa.use_sa = false;
        assert_eq!(e_sigma_count(&no_sa), 0);
    }

    #[test]
    fn block_totals_add_up() {
        let r = cost_report(&ModelConfig::baseline()).unwrap();
        assert_eq!(r.macs_per_frame, r.macs.total());
        assert_eq!(r.peak_memory_bytes, r.memory.total());
    }
}
