use std::collections::{BTreeMap, BTreeSet};
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::cost::cost_report;
use crate::error::{Error, Result};
use crate::evaluation::{ate, umeyama_align};
use crate::events::EventVoxelGrid;
use crate::model::{load_weights, ModelConfig, WeightStore};
use crate::pipeline::{bypass_with_oracle_flow, run, OracleOptions, SyntheticScene, Trajectory, TrackerOptions};

/// Graph hyperparameter values to cross.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub n_patches: Vec<usize>,
    pub removal_window: Vec<usize>,
    pub patch_lifetime: Vec<usize>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self::standard()
    }
}

impl SweepGrid {
    /// 396 cells: `N` in 16..=96 step 8, `R_w` in {8,10,12,14,16,22},
    /// `P_LT` in 8..=13.
    pub fn standard() -> Self {
        Self {
            n_patches: (16..=96).step_by(8).collect(),
            removal_window: vec![8, 10, 12, 14, 16, 22],
            patch_lifetime: (8..=13).collect(),
        }
    }

    /// `(n_patches, removal_window, patch_lifetime)` in row-major order.
    pub fn cells(&self) -> Vec<(usize, usize, usize)> {
        let mut out = Vec::new();
        for &n in &self.n_patches {
            for &r in &self.removal_window {
                for &p in &self.patch_lifetime {
                    out.push((n, r, p));
                }
            }
        }
        out
    }

    /// Parse `key = values` lines where values are `a,b,c`, `lo:hi` or
    /// `lo:hi:step` (inclusive). Unlisted keys keep their standard values.
    pub fn parse(text: &str) -> Result<Self> {
        let mut g = Self::standard();
        let mut offset = 0;
        for line in text.split_inclusive('\n') {
            let here = offset;
            offset += line.len();
            let l = line.split('#').next().unwrap_or("").trim();
            if l.is_empty() {
                continue;
            }
            let perr = |m: String| Error::Parse { offset: here, message: m };
            let (k, v) = l.split_once('=').ok_or_else(|| perr(format!("expected `key = values`, got `{l}`")))?;
            let values = parse_values(v.trim()).map_err(perr)?;
            match k.trim() {
                "n_patches" => g.n_patches = values,
                "removal_window" => g.removal_window = values,
                "patch_lifetime" => g.patch_lifetime = values,
                other => return Err(perr(format!("unknown sweep key `{other}`"))),
            }
        }
        Ok(g)
    }
}

fn parse_values(v: &str) -> std::result::Result<Vec<usize>, String> {
    let num = |s: &str| s.trim().parse::<usize>().map_err(|e| format!("`{s}`: {e}"));
    let out: Vec<usize> = if v.contains(':') {
        let parts: Vec<&str> = v.split(':').collect();
        let (lo, hi, step) = match parts.as_slice() {
            [a, b] => (num(a)?, num(b)?, 1),
            [a, b, c] => (num(a)?, num(b)?, num(c)?),
            _ => return Err(format!("bad range `{v}`")),
        };
        if step == 0 {
            return Err("range step must be positive".into());
        }
        (lo..=hi).step_by(step).collect()
    } else {
        v.split(',').map(num).collect::<std::result::Result<_, _>>()?
    };
    if out.is_empty() {
        return Err(format!("`{v}` selects no values"));
    }
    Ok(out)
}

/// Scores a single configuration; lower is better.
pub trait Evaluator: Sync {
    fn name(&self) -> &str;
    fn evaluate(&self, cfg: &ModelConfig) -> Result<f64>;
}

/// Cheap proxy: `1 / sqrt(edges)`, the standard-error scaling of a
/// least-squares estimate with that many constraints.
#[derive(Debug, Clone, Copy, Default)]
pub struct CostEvaluator;

impl Evaluator for CostEvaluator {
    fn name(&self) -> &str {
        "cost"
    }

    fn evaluate(&self, cfg: &ModelConfig) -> Result<f64> {
        let e = cost_report(cfg)?.n_edges;
        if e == 0 {
            return Err(Error::Validation("configuration has no edges".into()));
        }
        Ok(1.0 / (e as f64).sqrt())
    }
}

/// Aligned ATE of geometry-only tracking with noisy exact flow.
#[derive(Debug, Clone)]
pub struct OracleEvaluator {
    pub scene: SyntheticScene,
    pub options: OracleOptions,
}

impl Evaluator for OracleEvaluator {
    fn name(&self) -> &str {
        "oracle"
    }

    fn evaluate(&self, cfg: &ModelConfig) -> Result<f64> {
        let est = bypass_with_oracle_flow(&self.scene, cfg, &self.options)?;
        let gt = self.scene.ground_truth();
        ate(&est, &gt, &umeyama_align(&est, &gt, true)?)
    }
}

/// Aligned ATE of the full network on a recorded sequence.
pub struct PipelineEvaluator {
    pub grids: Vec<EventVoxelGrid>,
    pub ground_truth: Trajectory,
    /// Weights directory; random weights seeded by `seed` when absent.
    pub weights: Option<PathBuf>,
    pub seed: u64,
    pub options: TrackerOptions,
}

impl Evaluator for PipelineEvaluator {
    fn name(&self) -> &str {
        "pipeline"
    }

    fn evaluate(&self, cfg: &ModelConfig) -> Result<f64> {
        let w: WeightStore = match &self.weights {
            Some(p) => load_weights(p, cfg)?,
            None => WeightStore::init_random(cfg, self.seed),
        };
        let (est, _) = run(&self.grids, &w, cfg, self.options.clone())?;
        ate(&est, &self.ground_truth, &umeyama_align(&est, &self.ground_truth, true)?)
    }
}

/// Looks up externally measured metrics.
#[derive(Debug, Clone, Default)]
pub struct TableEvaluator {
    pub metrics: BTreeMap<(usize, usize, usize), f64>,
}

#[derive(Deserialize)]
struct TableRow {
    n_patches: usize,
    removal_window: usize,
    patch_lifetime: usize,
    metric: f64,
}

impl TableEvaluator {
    /// CSV with header `n_patches,removal_window,patch_lifetime,metric`.
    pub fn from_csv(path: &Path) -> Result<Self> {
        let mut rd = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
        let mut metrics = BTreeMap::new();
        for r in rd.deserialize::<TableRow>() {
            let r = r.map_err(|e| csv_err(path, e))?;
            metrics.insert((r.n_patches, r.removal_window, r.patch_lifetime), r.metric);
        }
        Ok(Self { metrics })
    }
}

impl Evaluator for TableEvaluator {
    fn name(&self) -> &str {
        "table"
    }

    fn evaluate(&self, cfg: &ModelConfig) -> Result<f64> {
        let key = (cfg.n_patches, cfg.removal_window, cfg.patch_lifetime);
        self.metrics
            .get(&key)
            .copied()
            .ok_or_else(|| Error::Validation(format!("no metric for cell {key:?}")))
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    let offset = e.position().map_or(0, |p| p.byte() as usize);
    Error::Parse {
        offset,
        message: format!("{}: {e}", path.display()),
    }
}

/// One sweep cell. Failed cells keep their analytic costs when those could
/// be computed, and carry the error message.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub n_patches: usize,
    pub removal_window: usize,
    pub patch_lifetime: usize,
    pub status: String,
    pub n_edges: u64,
    pub macs_per_frame: u64,
    pub e_sigma: u64,
    pub peak_memory_bytes: usize,
    pub metric: Option<f64>,
    pub error: String,
}

impl SweepRow {
    pub fn key(&self) -> (usize, usize, usize) {
        (self.n_patches, self.removal_window, self.patch_lifetime)
    }

    pub fn ok(&self) -> bool {
        self.status == "ok"
    }
}

#[derive(Debug, Clone, Default)]
pub struct SweepOptions {
    /// Append-only record of finished cells; existing entries are reused.
    pub progress: Option<PathBuf>,
    /// Stop after evaluating this many new cells.
    pub max_new_cells: Option<usize>,
    pub parallel: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutcome {
    /// Finished cells in grid order.
    pub rows: Vec<SweepRow>,
    pub complete: bool,
}

fn evaluate_cell(base: &ModelConfig, cell: (usize, usize, usize), eval: &dyn Evaluator) -> SweepRow {
    let cfg = base.clone().with_graph(cell.0, cell.1, cell.2);
    let mut row = SweepRow {
        n_patches: cell.0,
        removal_window: cell.1,
        patch_lifetime: cell.2,
        status: "failed".into(),
        n_edges: 0,
        macs_per_frame: 0,
        e_sigma: 0,
        peak_memory_bytes: 0,
        metric: None,
        error: String::new(),
    };
    match cost_report(&cfg) {
        Ok(c) => {
            row.n_edges = c.n_edges;
            row.macs_per_frame = c.macs_per_frame;
            row.e_sigma = c.e_sigma;
            row.peak_memory_bytes = c.peak_memory_bytes;
        }
        Err(e) => {
            row.error = e.to_string();
            return row;
        }
    }
    match eval.evaluate(&cfg) {
        Ok(m) if m.is_finite() => {
            row.status = "ok".into();
            row.metric = Some(m);
        }
        Ok(m) => row.error = format!("non-finite metric {m}"),
        Err(e) => row.error = e.to_string(),
    }
    if !row.ok() {
        log::warn!("sweep cell {:?} failed: {}", cell, row.error);
    }
    row
}

/// Read rows from a progress file.
pub fn read_progress(path: &Path) -> Result<Vec<SweepRow>> {
    let mut rd = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    rd.deserialize().map(|r| r.map_err(|e| csv_err(path, e))).collect()
}

/// Evaluate every grid cell not already recorded in the progress file.
pub fn run_sweep(base: &ModelConfig, grid: &SweepGrid, eval: &dyn Evaluator, opts: &SweepOptions) -> Result<SweepOutcome> {
    base.validate_for_cost()?;
    let cells = grid.cells();
    let mut done: BTreeMap<(usize, usize, usize), SweepRow> = BTreeMap::new();
    let mut writer = None;
    if let Some(p) = &opts.progress {
        let exists = p.metadata().map(|m| m.len() > 0).unwrap_or(false);
        if exists {
            for r in read_progress(p)? {
                done.insert(r.key(), r);
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(p).map_err(|e| Error::io(p, e))?;
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
        if !exists {
            w.write_record([
                "n_patches",
                "removal_window",
                "patch_lifetime",
                "status",
                "n_edges",
                "macs_per_frame",
                "e_sigma",
                "peak_memory_bytes",
                "metric",
                "error",
            ])
            .map_err(|e| csv_err(p, e))?;
            w.flush().map_err(|e| Error::io(p, e))?;
        }
        writer = Some(Mutex::new(w));
    }
    let seen: BTreeSet<_> = done.keys().copied().collect();
    let mut pending: Vec<_> = cells.iter().copied().filter(|c| !seen.contains(c)).collect();
    let complete = opts.max_new_cells.is_none_or(|k| k >= pending.len());
    if let Some(k) = opts.max_new_cells {
        pending.truncate(k);
    }

    let record = |row: SweepRow| -> Result<SweepRow> {
        if let Some(w) = &writer {
            let path = opts.progress.as_deref().expect("writer implies path");
            let mut w = w.lock().expect("progress writer poisoned");
            w.serialize(&row).map_err(|e| csv_err(path, e))?;
            w.flush().map_err(|e| Error::io(path, e))?;
        }
        Ok(row)
    };
    let fresh: Vec<SweepRow> = if opts.parallel {
        pending
            .par_iter()
            .map(|&c| record(evaluate_cell(base, c, eval)))
            .collect::<Result<_>>()?
    } else {
        pending.iter().map(|&c| record(evaluate_cell(base, c, eval))).collect::<Result<_>>()?
    };
    for r in fresh {
        done.insert(r.key(), r);
    }
    let rows = cells.iter().filter_map(|c| done.remove(c)).collect();
    Ok(SweepOutcome { rows, complete })
}

/// Write rows as CSV with a header.
pub fn write_rows(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    let mut f = w.into_inner().map_err(|e| Error::Validation(e.to_string()))?;
    f.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_grid_size() {
        assert_eq!(SweepGrid::standard().cells().len(), 396);
    }

    #[test]
    fn grid_parsing() {
        let g = SweepGrid::parse("n_patches = 16:32:8\nremoval_window = 8, 10\n# note\n").unwrap();
        assert_eq!(g.n_patches, vec![16, 24, 32]);
        assert_eq!(g.removal_window, vec![8, 10]);
        assert_eq!(g.patch_lifetime, (8..=13).collect::<Vec<_>>());
        assert!(matches!(SweepGrid::parse("bogus = 1"), Err(Error::Parse { .. })));
        assert!(SweepGrid::parse("n_patches = 4:2").is_err());
    }

    #[test]
    fn failed_cells_are_marked() {
        let grid = SweepGrid {
            n_patches: vec![0, 8],
            removal_window: vec![4],
            patch_lifetime: vec![3],
        };
        let out = run_sweep(&ModelConfig::tiny(), &grid, &CostEvaluator, &SweepOptions::default()).unwrap();
        assert_eq!(out.rows.len(), 2);
        assert!(!out.rows[0].ok());
        assert!(out.rows[0].metric.is_none());
        assert!(out.rows[1].ok());
    }

    #[test]
    fn resume_matches_uninterrupted() {
        let dir = tempfile::tempdir().unwrap();
        let grid = SweepGrid {
            n_patches: vec![8, 16, 24],
            removal_window: vec![4, 6],
            patch_lifetime: vec![3, 5],
        };
        let cfg = ModelConfig::tiny();
        let full = run_sweep(&cfg, &grid, &CostEvaluator, &SweepOptions::default()).unwrap();
        let progress = dir.path().join("progress.csv");
        let partial = run_sweep(
            &cfg,
            &grid,
            &CostEvaluator,
            &SweepOptions {
                progress: Some(progress.clone()),
                max_new_cells: Some(5),
                parallel: true,
            },
        )
        .unwrap();
        assert!(!partial.complete);
        assert_eq!(partial.rows.len(), 5);
        let resumed = run_sweep(
            &cfg,
            &grid,
            &CostEvaluator,
            &SweepOptions {
                progress: Some(progress.clone()),
                max_new_cells: None,
                parallel: true,
            },
        )
        .unwrap();
        assert!(resumed.complete);
        assert_eq!(resumed.rows, full.rows);
        assert_eq!(read_progress(&progress).unwrap().len(), 12);
    }
}
