//! Per-frame tracking loop, trajectories and synthetic test scenes.

mod oracle;
mod synthetic;
mod tracker;
mod trajectory;

pub use oracle::{bypass_with_oracle_flow, OracleOptions};
pub use synthetic::{Motion, SceneSpec, SyntheticScene};
pub use tracker::{run, BlockMacs, BlockTimes, FrameStats, RunStats, Tracker, TrackerOptions};
pub use trajectory::{format_sig, parse_tum, Trajectory};
