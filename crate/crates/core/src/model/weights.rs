//! Named FP32 tensors backing the patchifier and update operator.
//!
//! On disk a store is a `weights.json` manifest plus a `weights.bin` blob of
//! little-endian `f32` values. Each manifest entry records a tensor's name,
//! dtype, shape and byte offset into the blob.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use super::config::{ModelConfig, STAGE1_CHANNELS, STAGE2_CHANNELS, STEM_CHANNELS};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "weights.json";
pub const BLOB_FILE: &str = "weights.bin";

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum InitKind {
    /// Uniform in +-1/sqrt(fan_in).
    FanIn(usize),
    Ones,
    Zeros,
}

fn push_conv(out: &mut Vec<(TensorSpec, InitKind)>, name: &str, cout: usize, cin: usize, k: usize) {
    let fan_in = cin * k * k;
    out.push((
        TensorSpec {
            name: format!("{name}.weight"),
            shape: vec![cout, cin, k, k],
        },
        InitKind::FanIn(fan_in),
    ));
    out.push((
        TensorSpec {
            name: format!("{name}.bias"),
            shape: vec![cout],
        },
        InitKind::FanIn(fan_in),
    ));
}

fn push_linear(out: &mut Vec<(TensorSpec, InitKind)>, name: &str, dout: usize, din: usize) {
    out.push((
        TensorSpec {
            name: format!("{name}.weight"),
            shape: vec![dout, din],
        },
        InitKind::FanIn(din),
    ));
    out.push((
        TensorSpec {
            name: format!("{name}.bias"),
            shape: vec![dout],
        },
        InitKind::FanIn(din),
    ));
}

fn enumerate_with_init(cfg: &ModelConfig) -> Vec<(TensorSpec, InitKind)> {
    let mut t = Vec::new();
    let (c0, c1, c2) = (STEM_CHANNELS, STAGE1_CHANNELS, STAGE2_CHANNELS);

    push_conv(&mut t, "patchifier.stem", c0, cfg.bins, 3);
    push_conv(&mut t, "patchifier.stage1.conv_a", c1, c0, 3);
    push_conv(&mut t, "patchifier.stage1.conv_b", c1, c1, 3);
    if cfg.use_bypass {
        push_conv(&mut t, "patchifier.stage1.bypass", c1, c0, 1);
    }
    push_conv(&mut t, "patchifier.stage2.conv_a", c2, c1, 3);
    push_conv(&mut t, "patchifier.stage2.conv_b", c2, c2, 3);
    if cfg.use_bypass {
        push_conv(&mut t, "patchifier.stage2.bypass", c2, c1, 1);
    }
    push_conv(&mut t, "patchifier.mf_head", cfg.ch_mf, c2, 1);
    push_conv(&mut t, "patchifier.cf_head", cfg.ch_cf, c2, 1);
    if cfg.use_pyr {
        push_conv(&mut t, "patchifier.pyr.conv_a", c2, c2, 3);
        push_conv(&mut t, "patchifier.pyr.conv_b", c2, c2, 3);
        push_conv(&mut t, "patchifier.pyr.head", cfg.ch_mf, c2, 1);
    }

    let d = cfg.hidden_dim();
    push_linear(&mut t, "update.corr_encoder", d, cfg.corr_len());
    for rep in 1..=2 {
        if cfg.use_tc {
            push_linear(&mut t, &format!("update.tc{rep}"), d, 3 * d);
        }
        if cfg.use_sa {
            for part in ["gate", "value", "proj"] {
                push_linear(&mut t, &format!("update.sa{rep}.{part}"), d, d);
            }
        }
        if cfg.use_gru {
            for part in ["z", "r", "c"] {
                push_linear(&mut t, &format!("update.gru{rep}.{part}"), d, 2 * d);
            }
        } else {
            let p = format!("update.light{rep}");
            t.push((
                TensorSpec {
                    name: format!("{p}.norm.weight"),
                    shape: vec![2 * d],
                },
                InitKind::Ones,
            ));
            t.push((
                TensorSpec {
                    name: format!("{p}.norm.bias"),
                    shape: vec![2 * d],
                },
                InitKind::Zeros,
            ));
            push_linear(&mut t, &format!("{p}.fc1"), d, 2 * d);
            push_linear(&mut t, &format!("{p}.fc2"), d, d);
        }
    }
    push_linear(&mut t, "update.flow_head", 2, d);
    push_linear(&mut t, "update.conf_head", 1, d);
    t
}

/// Every tensor the given configuration needs, in canonical order.
///
/// Toggles add or remove fixed groups of names:
/// `use_bypass` the two `*.bypass` projections, `use_pyr` the `patchifier.pyr.*`
/// branch, `use_tc` `update.tc{1,2}`, `use_sa` `update.sa{1,2}.*`, and
/// `use_gru` swaps `update.light{1,2}.*` for `update.gru{1,2}.*`.
pub fn required_tensors(cfg: &ModelConfig) -> Vec<TensorSpec> {
    enumerate_with_init(cfg).into_iter().map(|(s, _)| s).collect()
}

/// Total number of weight elements for a configuration.
pub fn parameter_count(cfg: &ModelConfig) -> usize {
    required_tensors(cfg)
        .iter()
        .map(|s| s.shape.iter().product::<usize>())
        .sum()
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeightMetadata {
    pub config_hash: String,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightStore {
    tensors: BTreeMap<String, Tensor>,
    pub metadata: WeightMetadata,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    config_hash: String,
    #[serde(default)]
    seed: Option<u64>,
    #[serde(default = "default_blob")]
    blob: String,
    tensors: Vec<ManifestEntry>,
}

fn default_blob() -> String {
    BLOB_FILE.to_string()
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: usize,
}

impl WeightStore {
    /// Deterministic random weights for a configuration.
    pub fn init_random(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        for (spec, init) in enumerate_with_init(cfg) {
            let n: usize = spec.shape.iter().product();
            let data = match init {
                InitKind::FanIn(fan_in) => {
                    let bound = 1.0 / (fan_in.max(1) as f32).sqrt();
                    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                    (0..n).map(|_| dist.sample(&mut rng)).collect()
                }
                InitKind::Ones => vec![1.0; n],
                InitKind::Zeros => vec![0.0; n],
            };
            tensors.insert(
                spec.name,
                Tensor {
                    shape: spec.shape,
                    data,
                },
            );
        }
        Self {
            tensors,
            metadata: WeightMetadata {
                config_hash: cfg.hash_hex(),
                seed: Some(seed),
            },
        }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Insert or replace a tensor. Intended for building stores in code;
    /// a loaded store is treated as read-only.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn payload_bytes(&self) -> usize {
        self.tensors.values().map(|t| t.numel() * 4).sum()
    }

    /// Ensure every tensor required by `cfg` exists with the expected shape.
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        for spec in required_tensors(cfg) {
            let t = self.get(&spec.name)?;
            if t.shape != spec.shape {
                return Err(Error::ShapeMismatch {
                    name: spec.name,
                    expected: spec.shape,
                    found: t.shape.clone(),
                });
            }
        }
        Ok(())
    }

    /// Write `weights.json` and `weights.bin` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut blob = Vec::with_capacity(self.payload_bytes());
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            entries.push(ManifestEntry {
                name: name.clone(),
                dtype: "f32".into(),
                shape: t.shape.clone(),
                offset: blob.len(),
            });
            for v in &t.data {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        let manifest = Manifest {
            config_hash: self.metadata.config_hash.clone(),
            seed: self.metadata.seed,
            blob: BLOB_FILE.into(),
            tensors: entries,
        };
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        let mpath = dir.join(MANIFEST_FILE);
        fs::write(&mpath, json).map_err(|e| Error::io(&mpath, e))?;
        let bpath = dir.join(BLOB_FILE);
        fs::write(&bpath, blob).map_err(|e| Error::io(&bpath, e))?;
        Ok(())
    }
}

fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

/// Load a store from a directory (or a manifest path) and validate it
/// against `cfg`. Tensors not used by `cfg` are reported and dropped.
pub fn load_weights(path: &Path, cfg: &ModelConfig) -> Result<WeightStore> {
    let mpath = manifest_path(path);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
        offset: 0,
        message: format!("{}: {e}", mpath.display()),
    })?;
    let bpath = mpath
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&manifest.blob);
    let blob = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;

    let required: BTreeMap<String, Vec<usize>> = required_tensors(cfg)
        .into_iter()
        .map(|s| (s.name, s.shape))
        .collect();

    let mut tensors = BTreeMap::new();
    for entry in manifest.tensors {
        let Some(expected) = required.get(&entry.name) else {
            log::warn!("ignoring unknown tensor `{}`", entry.name);
            continue;
        };
        if entry.dtype != "f32" {
            return Err(Error::Validation(format!(
                "tensor `{}` has unsupported dtype `{}`",
                entry.name, entry.dtype
            )));
        }
        if &entry.shape != expected {
            return Err(Error::ShapeMismatch {
                name: entry.name,
                expected: expected.clone(),
                found: entry.shape,
            });
        }
        let n: usize = entry.shape.iter().product();
        let end = entry.offset + n * 4;
        if end > blob.len() {
            return Err(Error::Parse {
                offset: entry.offset,
                message: format!(
                    "tensor `{}` extends past the end of {}",
                    entry.name,
                    bpath.display()
                ),
            });
        }
        let data = blob[entry.offset..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        tensors.insert(
            entry.name,
            Tensor {
                shape: entry.shape,
                data,
            },
        );
    }
    let store = WeightStore {
        tensors,
        metadata: WeightMetadata {
            config_hash: manifest.config_hash,
            seed: manifest.seed,
        },
    };
    store.validate(cfg)?;
    Ok(store)
}
