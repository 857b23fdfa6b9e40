use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Trunk widths of the feature extractor. These do not change across presets.
pub const STEM_CHANNELS: usize = 32;
pub const STAGE1_CHANNELS: usize = 128;
pub const STAGE2_CHANNELS: usize = 256;

/// Architecture and patch-graph hyperparameters.
///
/// This is the single source of truth read by both the runtime and the
/// analytical cost model.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    pub width: usize,
    pub height: usize,
    pub ch_mf: usize,
    pub ch_cf: usize,
    pub n_patches: usize,
    pub removal_window: usize,
    pub patch_lifetime: usize,
    pub opt_window: usize,
    pub use_pyr: bool,
    pub use_bypass: bool,
    pub use_tc: bool,
    pub use_sa: bool,
    pub use_gru: bool,
    pub bins: usize,
    pub corr_radius: usize,
    /// Update-operator passes per incoming frame.
    pub update_iters: usize,
    /// Levenberg-Marquardt iterations per bundle-adjustment call.
    pub ba_iters: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::baseline()
    }
}

impl ModelConfig {
    /// The full-size reference network.
    pub fn baseline() -> Self {
        Self {
            width: 240,
            height: 180,
            ch_mf: 128,
            ch_cf: 384,
            n_patches: 96,
            removal_window: 22,
            patch_lifetime: 13,
            opt_window: 10,
            use_pyr: true,
            use_bypass: true,
            use_tc: true,
            use_sa: true,
            use_gru: true,
            bins: 5,
            corr_radius: 3,
            update_iters: 1,
            ba_iters: 2,
        }
    }

    /// The shrunken network: narrower features, no PYR level, no by-pass
    /// connections, lightweight recurrent unit, and a sparser patch graph.
    pub fn tiny() -> Self {
        Self {
            ch_mf: 64,
            ch_cf: 96,
            n_patches: 24,
            removal_window: 12,
            patch_lifetime: 10,
            use_pyr: false,
            use_bypass: false,
            use_gru: false,
            use_tc: true,
            use_sa: true,
            ..Self::baseline()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "baseline" => Some(Self::baseline()),
            "tiny" => Some(Self::tiny()),
            _ => None,
        }
    }

    pub fn with_resolution(mut self, width: usize, height: usize) -> Self {
        self.width = width;
        self.height = height;
        self
    }

    pub fn with_graph(mut self, n_patches: usize, removal_window: usize, patch_lifetime: usize) -> Self {
        self.n_patches = n_patches;
        self.removal_window = removal_window;
        self.patch_lifetime = patch_lifetime;
        self
    }

    /// Input width after zero-padding to a multiple of 16.
    pub fn padded_width(&self) -> usize {
        self.width.div_ceil(16) * 16
    }

    pub fn padded_height(&self) -> usize {
        self.height.div_ceil(16) * 16
    }

    /// Spatial size of MF/CF maps (columns, rows).
    pub fn feature_dims(&self) -> (usize, usize) {
        (self.padded_width() / 4, self.padded_height() / 4)
    }

    /// Spatial size of the PYR level.
    pub fn pyr_dims(&self) -> (usize, usize) {
        (self.padded_width() / 16, self.padded_height() / 16)
    }

    /// Feature-map region backed by real sensor pixels.
    pub fn valid_feature_dims(&self) -> (usize, usize) {
        (self.width / 4, self.height / 4)
    }

    pub fn corr_levels(&self) -> usize {
        if self.use_pyr {
            2
        } else {
            1
        }
    }

    pub fn corr_window(&self) -> usize {
        2 * self.corr_radius + 1
    }

    /// Length of one edge's correlation feature.
    pub fn corr_len(&self) -> usize {
        self.corr_window() * self.corr_window() * 9 * self.corr_levels()
    }

    /// Hidden dimension of the update operator.
    pub fn hidden_dim(&self) -> usize {
        self.ch_cf
    }

    /// Checks needed before running the network.
    pub fn validate(&self) -> Result<()> {
        let mut bad = self.cost_field_errors();
        if self.n_patches == 0 {
            bad.push("n_patches must be >= 1".to_string());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }

    /// Checks needed for analytical costing. `n_patches = 0` is allowed
    /// there and simply yields an empty graph.
    pub fn validate_for_cost(&self) -> Result<()> {
        let bad = self.cost_field_errors();
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }

    fn cost_field_errors(&self) -> Vec<String> {
        let mut bad = Vec::new();
        let positive = [
            ("width", self.width),
            ("height", self.height),
            ("ch_mf", self.ch_mf),
            ("ch_cf", self.ch_cf),
            ("removal_window", self.removal_window),
            ("patch_lifetime", self.patch_lifetime),
            ("opt_window", self.opt_window),
            ("bins", self.bins),
            ("update_iters", self.update_iters),
        ];
        for (name, v) in positive {
            if v == 0 {
                bad.push(format!("{name} must be >= 1"));
            }
        }
        if self.width < 16 || self.height < 16 {
            bad.push("width and height must be >= 16".to_string());
        }
        bad
    }

    /// Render as the flat `key = value` text format.
    pub fn to_kv_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.kv_pairs() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    fn kv_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("width", self.width.to_string()),
            ("height", self.height.to_string()),
            ("ch_mf", self.ch_mf.to_string()),
            ("ch_cf", self.ch_cf.to_string()),
            ("n_patches", self.n_patches.to_string()),
            ("removal_window", self.removal_window.to_string()),
            ("patch_lifetime", self.patch_lifetime.to_string()),
            ("opt_window", self.opt_window.to_string()),
            ("use_pyr", self.use_pyr.to_string()),
            ("use_bypass", self.use_bypass.to_string()),
            ("use_tc", self.use_tc.to_string()),
            ("use_sa", self.use_sa.to_string()),
            ("use_gru", self.use_gru.to_string()),
            ("bins", self.bins.to_string()),
            ("corr_radius", self.corr_radius.to_string()),
            ("update_iters", self.update_iters.to_string()),
            ("ba_iters", self.ba_iters.to_string()),
        ]
    }

    /// Apply one key/value pair. Returns `Ok(false)` if the key is not a
    /// model field.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn num(key: &str, v: &str) -> Result<usize> {
            v.parse()
                .map_err(|_| Error::Config(format!("{key}: `{v}` is not a non-negative integer")))
        }
        fn flag(key: &str, v: &str) -> Result<bool> {
            match v {
                "true" | "1" | "yes" | "on" => Ok(true),
                "false" | "0" | "no" | "off" => Ok(false),
                _ => Err(Error::Config(format!("{key}: `{v}` is not a boolean"))),
            }
        }
        match key {
            "width" => self.width = num(key, value)?,
            "height" => self.height = num(key, value)?,
            "ch_mf" => self.ch_mf = num(key, value)?,
            "ch_cf" => self.ch_cf = num(key, value)?,
            "n_patches" => self.n_patches = num(key, value)?,
            "removal_window" => self.removal_window = num(key, value)?,
            "patch_lifetime" => self.patch_lifetime = num(key, value)?,
            "opt_window" => self.opt_window = num(key, value)?,
            "use_pyr" => self.use_pyr = flag(key, value)?,
            "use_bypass" => self.use_bypass = flag(key, value)?,
            "use_tc" => self.use_tc = flag(key, value)?,
            "use_sa" => self.use_sa = flag(key, value)?,
            "use_gru" => self.use_gru = flag(key, value)?,
            "bins" => self.bins = num(key, value)?,
            "corr_radius" => self.corr_radius = num(key, value)?,
            "update_iters" => self.update_iters = num(key, value)?,
            "ba_iters" => self.ba_iters = num(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Stable digest of the configuration, stored with weight archives.
    pub fn hash_hex(&self) -> String {
        let digest = Sha256::digest(self.to_kv_text().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

/// Parse `key = value` lines into an ordered map. `#` starts a comment.
pub fn parse_kv_text(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .or_else(|| line.split_once(':'))
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
        let k = k.trim().to_string();
        if map.insert(k.clone(), v.trim().to_string()).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key `{k}`", lineno + 1)));
        }
    }
    Ok(map)
}

/// Build a [`ModelConfig`] from key/value pairs. A `preset` key selects the
/// starting point (default `baseline`); remaining model keys override it.
/// Keys that are not model fields are returned untouched.
pub fn model_config_from_kv(
    mut kv: BTreeMap<String, String>,
) -> Result<(ModelConfig, BTreeMap<String, String>)> {
    let mut cfg = match kv.remove("preset") {
        Some(name) => ModelConfig::preset(&name)
            .ok_or_else(|| Error::Config(format!("unknown preset `{name}`")))?,
        None => ModelConfig::baseline(),
    };
    let mut rest = BTreeMap::new();
    for (k, v) in kv {
        if !cfg.set(&k, &v)? {
            rest.insert(k, v);
        }
    }
    Ok((cfg, rest))
}
