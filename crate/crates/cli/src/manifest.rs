use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use patchvo::events::WindowPolicy;
use patchvo::geometry::Intrinsics;
use patchvo::model::{parse_kv_text, ModelConfig};
use patchvo::patchifier::SamplingStrategy;
use patchvo::pipeline::TrackerOptions;

/// Bad invocation or missing input; maps to exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

pub fn require_exists(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(usage(format!("{what} not found: {}", path.display())))
    }
}

/// Everything a tracking run reads, checked up front.
#[derive(Debug, Clone)]
pub struct RunManifest {
    pub events: PathBuf,
    pub config: Option<PathBuf>,
    pub weights: Option<PathBuf>,
    pub seed: u64,
    pub out: PathBuf,
}

impl RunManifest {
    pub fn check(&self) -> Result<()> {
        require_exists(&self.events, "events file")?;
        if let Some(c) = &self.config {
            require_exists(c, "config file")?;
        }
        if let Some(w) = &self.weights {
            require_exists(w, "weights")?;
        }
        Ok(())
    }
}

/// A model config plus the run-level settings that share its file.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub window: WindowPolicy,
    pub tracker: TrackerOptions,
}

const RUN_KEYS: [&str; 8] = [
    "window_us",
    "window_events",
    "fx",
    "fy",
    "cx",
    "cy",
    "sampling",
    "prune_threshold",
];

pub fn load_run_config(path: Option<&Path>, default: ModelConfig, seed: u64) -> Result<RunConfig> {
    let kv = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            parse_kv_text(&text)?
        }
        None => BTreeMap::new(),
    };
    from_kv(kv, default, seed)
}

pub fn from_kv(mut kv: BTreeMap<String, String>, default: ModelConfig, seed: u64) -> Result<RunConfig> {
    let mut model = match kv.remove("preset") {
        Some(name) => ModelConfig::preset(&name)
            .ok_or_else(|| patchvo::Error::Config(format!("unknown preset `{name}`")))?,
        None => default,
    };
    let mut rest = BTreeMap::new();
    for (k, v) in kv {
        if !model.set(&k, &v)? {
            rest.insert(k, v);
        }
    }
    let unknown: Vec<&str> = rest.keys().map(String::as_str).filter(|k| !RUN_KEYS.contains(k)).collect();
    if !unknown.is_empty() {
        return Err(patchvo::Error::Config(format!("unknown keys: {}", unknown.join(", "))).into());
    }
    let num = |k: &str| -> Result<Option<f64>> {
        rest.get(k)
            .map(|v| v.parse::<f64>().map_err(|e| patchvo::Error::Config(format!("`{k}`: {e}")).into()))
            .transpose()
    };
    let window = match (rest.get("window_us"), rest.get("window_events")) {
        (Some(_), Some(_)) => return Err(patchvo::Error::Config("set only one of window_us and window_events".into()).into()),
        (Some(v), None) => WindowPolicy::FixedDuration(parse_int(v, "window_us")?),
        (None, Some(v)) => WindowPolicy::FixedCount(parse_int(v, "window_events")? as usize),
        (None, None) => WindowPolicy::default(),
    };
    let mut tracker = TrackerOptions::for_config(&model);
    let d = tracker.intrinsics;
    tracker.intrinsics = Intrinsics::new(
        num("fx")?.unwrap_or(d.fx),
        num("fy")?.unwrap_or(d.fy),
        num("cx")?.unwrap_or(d.cx),
        num("cy")?.unwrap_or(d.cy),
    );
    tracker.prune_threshold = num("prune_threshold")?;
    tracker.sampling = match rest.get("sampling").map(String::as_str) {
        None | Some("density") => SamplingStrategy::EventDensity,
        Some("uniform") => SamplingStrategy::UniformRandom,
        Some(o) => return Err(patchvo::Error::Config(format!("unknown sampling `{o}`")).into()),
    };
    tracker.seed = seed;
    Ok(RunConfig { model, window, tracker })
}

fn parse_int(v: &str, key: &str) -> Result<u64> {
    let n: u64 = v.parse().map_err(|e| patchvo::Error::Config(format!("`{key}`: {e}")))?;
    if n == 0 {
        return Err(patchvo::Error::Config(format!("`{key}` must be >= 1")).into());
    }
    Ok(n)
}

/// Render run-level settings back to `key = value` lines.
pub fn run_keys_text(window: WindowPolicy, k: &Intrinsics) -> String {
    let w = match window {
        WindowPolicy::FixedDuration(us) => format!("window_us = {us}\n"),
        WindowPolicy::FixedCount(n) => format!("window_events = {n}\n"),
    };
    format!("{w}fx = {}\nfy = {}\ncx = {}\ncy = {}\n", k.fx, k.fy, k.cx, k.cy)
}
