//! Analytical cost model and hyperparameter sweeps over the patch graph.

mod cost;
mod pareto;
mod sweep;

pub use cost::{
    ba_macs, cost_report, graph_edges, e_sigma_count, macs_per_frame, peak_memory, CostReport, MemoryBreakdown, EDGE_META_BYTES,
    PATCH_META_BYTES, UPDATE_WORKSPACE_ROWS,
};
pub use pareto::{knee_point, normalize, pareto_front, Knee, ParetoPoint};
pub use sweep::{
    read_progress, run_sweep, write_rows, CostEvaluator, Evaluator, OracleEvaluator, PipelineEvaluator, SweepGrid, SweepOptions, SweepOutcome,
    SweepRow, TableEvaluator,
};
