//! Convolutional feature extractor and patch sampling.
//!
//! Topology (all 3x3 convolutions use zero padding 1):
//!
//! ```text
//! EVG [B, H, W]  (zero-padded to multiples of 16)
//!   stem     3x3 B -> 32, stride 1, IN, ReLU
//!   stage1   3x3 32 -> 128 stride 2, IN, ReLU; 3x3 128 -> 128, IN; (+ 1x1 stride-2 by-pass); ReLU
//!   stage2   3x3 128 -> 256 stride 2, IN, ReLU; 3x3 256 -> 256, IN; (+ 1x1 stride-2 by-pass); ReLU
//!   mf_head  1x1 256 -> Ch_MF            at W/4 x H/4
//!   cf_head  1x1 256 -> Ch_CF            at W/4 x H/4
//!   pyr      two 3x3 stride-2 blocks 256 -> 256 (IN, ReLU), 1x1 -> Ch_MF at W/16 x H/16
//! ```
//!
//! With `use_bypass = false` the stages are plain conv stacks without the
//! projection skips.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::events::EventVoxelGrid;
use crate::graph::Patch;
use crate::model::{ModelConfig, WeightStore};
use crate::nn::{instance_norm, relu_inplace, Chw, Conv2d, OpCounter};

/// Channel-last feature map `[height, width, channels]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl FeatureMap {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f32) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    fn from_chw(x: &Chw) -> Self {
        let mut data = vec![0.0; x.data.len()];
        let n = x.h * x.w;
        for c in 0..x.c {
            let plane = x.plane(c);
            for p in 0..n {
                data[p * x.c + c] = plane[p];
            }
        }
        Self {
            width: x.w,
            height: x.h,
            channels: x.c,
            data,
        }
    }

    pub fn at(&self, x: usize, y: usize) -> &[f32] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn at_mut(&mut self, x: usize, y: usize) -> &mut [f32] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    /// Bilinear sample at real coordinates (`u` column, `v` row), with
    /// out-of-bounds neighbours contributing zero. Writes `channels` values.
    pub fn sample_bilinear(&self, u: f64, v: f64, out: &mut [f32]) {
        out.fill(0.0);
        let x0 = u.floor();
        let y0 = v.floor();
        let fx = (u - x0) as f32;
        let fy = (v - y0) as f32;
        let (x0, y0) = (x0 as i64, y0 as i64);
        let taps = [
            (x0, y0, (1.0 - fx) * (1.0 - fy)),
            (x0 + 1, y0, fx * (1.0 - fy)),
            (x0, y0 + 1, (1.0 - fx) * fy),
            (x0 + 1, y0 + 1, fx * fy),
        ];
        for (x, y, w) in taps {
            if w == 0.0 || x < 0 || y < 0 || x >= self.width as i64 || y >= self.height as i64 {
                continue;
            }
            for (o, &f) in out.iter_mut().zip(self.at(x as usize, y as usize)) {
                *o += w * f;
            }
        }
    }

    pub fn payload_bytes(&self) -> usize {
        self.data.len() * 4
    }
}

/// Output of the feature extractor for one voxel grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub frame_id: u64,
    /// Matching features at 1/4 resolution.
    pub mf: FeatureMap,
    /// Context features at 1/4 resolution.
    pub cf: FeatureMap,
    /// Coarse matching features at 1/16 resolution, when enabled.
    pub pyr: Option<FeatureMap>,
    /// Absolute event mass pooled to 1/4 resolution; zero outside the
    /// sensor-backed region.
    pub density: Vec<f32>,
    /// Columns and rows of the feature map backed by real pixels.
    pub valid: (usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SamplingStrategy {
    /// Highest pooled event mass first; ties resolved in row-major order.
    #[default]
    EventDensity,
    UniformRandom,
}

struct Stage<'a> {
    conv_a: Conv2d<'a>,
    conv_b: Conv2d<'a>,
    bypass: Option<Conv2d<'a>>,
}

impl Stage<'_> {
    fn forward(&self, x: &Chw, ctr: &mut OpCounter, ws: &mut usize) -> Chw {
        let mut y = self.conv_a.forward(x, ctr);
        instance_norm(&mut y);
        relu_inplace(&mut y.data);
        let mut z = self.conv_b.forward(&y, ctr);
        instance_norm(&mut z);
        *ws = (*ws).max(x.payload_bytes() + y.payload_bytes() * 2 + z.payload_bytes());
        if let Some(bp) = &self.bypass {
            let skip = bp.forward(x, ctr);
            for (a, b) in z.data.iter_mut().zip(&skip.data) {
                *a += b;
            }
        }
        relu_inplace(&mut z.data);
        z
    }
}

/// Borrowed view of the extractor weights for one configuration.
pub struct Patchifier<'a> {
    cfg: &'a ModelConfig,
    stem: Conv2d<'a>,
    stage1: Stage<'a>,
    stage2: Stage<'a>,
    mf_head: Conv2d<'a>,
    cf_head: Conv2d<'a>,
    pyr: Option<(Conv2d<'a>, Conv2d<'a>, Conv2d<'a>)>,
}

impl<'a> Patchifier<'a> {
    pub fn new(weights: &'a WeightStore, cfg: &'a ModelConfig) -> Result<Self> {
        let conv = |name: &str, stride| Conv2d::from_store(weights, name, stride);
        let stage = |p: &str| -> Result<Stage<'a>> {
            Ok(Stage {
                conv_a: Conv2d::from_store(weights, &format!("{p}.conv_a"), 2)?,
                conv_b: Conv2d::from_store(weights, &format!("{p}.conv_b"), 1)?,
                bypass: if cfg.use_bypass {
                    Some(Conv2d::from_store(weights, &format!("{p}.bypass"), 2)?)
                } else {
                    None
                },
            })
        };
        let stem = conv("patchifier.stem", 1)?;
        if stem.cin != cfg.bins {
            return Err(Error::Config(format!(
                "stem expects {} input bins, config has {}",
                stem.cin, cfg.bins
            )));
        }
        let mf_head = conv("patchifier.mf_head", 1)?;
        let cf_head = conv("patchifier.cf_head", 1)?;
        if mf_head.cout != cfg.ch_mf || cf_head.cout != cfg.ch_cf {
            return Err(Error::Config("head widths do not match Ch_MF/Ch_CF".into()));
        }
        let pyr = if cfg.use_pyr {
            Some((
                conv("patchifier.pyr.conv_a", 2)?,
                conv("patchifier.pyr.conv_b", 2)?,
                conv("patchifier.pyr.head", 1)?,
            ))
        } else {
            None
        };
        Ok(Self {
            cfg,
            stem,
            stage1: stage("patchifier.stage1")?,
            stage2: stage("patchifier.stage2")?,
            mf_head,
            cf_head,
            pyr,
        })
    }

    /// Run the extractor. Returns the features and the largest transient
    /// activation footprint in bytes.
    pub fn extract(&self, evg: &EventVoxelGrid, ctr: &mut OpCounter) -> Result<(FeatureSet, usize)> {
        let cfg = self.cfg;
        if evg.width != cfg.width || evg.height != cfg.height || evg.bins != cfg.bins {
            return Err(Error::Config(format!(
                "voxel grid {}x{}x{} does not match configured {}x{}x{}",
                evg.bins, evg.width, evg.height, cfg.bins, cfg.width, cfg.height
            )));
        }
        let (wp, hp) = (cfg.padded_width(), cfg.padded_height());
        let mut input = Chw::zeros(cfg.bins, hp, wp);
        for b in 0..cfg.bins {
            for y in 0..cfg.height {
                for x in 0..cfg.width {
                    input.data[(b * hp + y) * wp + x] = evg.at(b, x, y) as f32;
                }
            }
        }

        let mut ws = 0usize;
        let mut s = self.stem.forward(&input, ctr);
        instance_norm(&mut s);
        relu_inplace(&mut s.data);
        // im2col buffer of the stem dominates at full resolution
        ws = ws.max(input.payload_bytes() * 10 + s.payload_bytes());
        let t1 = self.stage1.forward(&s, ctr, &mut ws);
        drop(s);
        let trunk = self.stage2.forward(&t1, ctr, &mut ws);
        drop(t1);

        let mf = FeatureMap::from_chw(&self.mf_head.forward(&trunk, ctr));
        let cf = FeatureMap::from_chw(&self.cf_head.forward(&trunk, ctr));
        let pyr = match &self.pyr {
            Some((a, b, head)) => {
                let mut p = a.forward(&trunk, ctr);
                instance_norm(&mut p);
                relu_inplace(&mut p.data);
                let mut p = b.forward(&p, ctr);
                instance_norm(&mut p);
                relu_inplace(&mut p.data);
                Some(FeatureMap::from_chw(&head.forward(&p, ctr)))
            }
            None => None,
        };

        let features = FeatureSet {
            frame_id: evg.frame_id,
            density: pooled_density(evg, cfg),
            valid: cfg.valid_feature_dims(),
            mf,
            cf,
            pyr,
        };
        Ok((features, ws))
    }

    /// Multiply-accumulates of one forward pass.
    pub fn macs(&self) -> u64 {
        patchifier_macs(self.cfg)
    }
}

/// Analytical MAC count of the extractor for a configuration.
pub fn patchifier_macs(cfg: &ModelConfig) -> u64 {
    use crate::model::{STAGE1_CHANNELS as C1, STAGE2_CHANNELS as C2, STEM_CHANNELS as C0};
    let p0 = (cfg.padded_width() * cfg.padded_height()) as u64;
    let (p1, p2, p3, p4) = (p0 / 4, p0 / 16, p0 / 64, p0 / 256);
    let (c0, c1, c2) = (C0 as u64, C1 as u64, C2 as u64);
    let (b, mf, cf) = (cfg.bins as u64, cfg.ch_mf as u64, cfg.ch_cf as u64);
    let mut m = p0 * 9 * b * c0;
    m += p1 * 9 * c0 * c1 + p1 * 9 * c1 * c1;
    m += p2 * 9 * c1 * c2 + p2 * 9 * c2 * c2;
    if cfg.use_bypass {
        m += p1 * c0 * c1 + p2 * c1 * c2;
    }
    m += p2 * c2 * (mf + cf);
    if cfg.use_pyr {
        m += p3 * 9 * c2 * c2 + p4 * 9 * c2 * c2 + p4 * c2 * mf;
    }
    m
}

fn pooled_density(evg: &EventVoxelGrid, cfg: &ModelConfig) -> Vec<f32> {
    let (fw, fh) = cfg.feature_dims();
    let (vw, vh) = cfg.valid_feature_dims();
    let mut d = vec![0.0f32; fw * fh];
    for cy in 0..vh {
        for cx in 0..vw {
            let mut acc = 0.0f64;
            for b in 0..evg.bins {
                for y in cy * 4..cy * 4 + 4 {
                    for x in cx * 4..cx * 4 + 4 {
                        acc += evg.at(b, x, y).abs();
                    }
                }
            }
            d[cy * fw + cx] = acc as f32;
        }
    }
    d
}

/// Convenience wrapper around [`Patchifier`].
pub fn extract_features(
    evg: &EventVoxelGrid,
    weights: &WeightStore,
    cfg: &ModelConfig,
) -> Result<FeatureSet> {
    let mut ctr = OpCounter::default();
    Ok(Patchifier::new(weights, cfg)?.extract(evg, &mut ctr)?.0)
}

/// Interior feature locations a 3x3 patch can be centred on, row-major.
fn interior_locations(fs: &FeatureSet) -> Vec<(usize, usize)> {
    let (vw, vh) = fs.valid;
    let mut locs = Vec::new();
    if vw < 3 || vh < 3 {
        return locs;
    }
    for v in 1..vh - 1 {
        for u in 1..vw - 1 {
            locs.push((u, v));
        }
    }
    locs
}

/// Pick `n_patches` distinct centres and cut their 3x3 matching features
/// and centre context vectors.
pub fn sample_patches(
    fs: &FeatureSet,
    cfg: &ModelConfig,
    strategy: SamplingStrategy,
    seed: u64,
) -> Result<Vec<Patch>> {
    let locs = interior_locations(fs);
    if cfg.n_patches > locs.len() {
        return Err(Error::Config(format!(
            "cannot sample {} patches from {} interior feature locations",
            cfg.n_patches,
            locs.len()
        )));
    }
    let chosen: Vec<(usize, usize)> = match strategy {
        SamplingStrategy::EventDensity => {
            let fw = fs.mf.width;
            let mut order: Vec<usize> = (0..locs.len()).collect();
            // stable sort keeps row-major order among equal scores
            order.sort_by(|&a, &b| {
                let da = fs.density[locs[a].1 * fw + locs[a].0];
                let db = fs.density[locs[b].1 * fw + locs[b].0];
                db.total_cmp(&da)
            });
            order[..cfg.n_patches].iter().map(|&i| locs[i]).collect()
        }
        SamplingStrategy::UniformRandom => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fs.frame_id.wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let mut idx = sample(&mut rng, locs.len(), cfg.n_patches).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| locs[i]).collect()
        }
    };

    let ch = fs.mf.channels;
    Ok(chosen
        .into_iter()
        .map(|(u, v)| {
            let mut feature = Vec::with_capacity(9 * ch);
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    feature.extend_from_slice(
                        fs.mf.at((u as i64 + dx) as usize, (v as i64 + dy) as usize),
                    );
                }
            }
            Patch {
                id: 0,
                frame_id: fs.frame_id,
                center: [u as f64, v as f64],
                feature,
                context: fs.cf.at(u, v).to_vec(),
                inv_depth: 1.0,
            }
        })
        .collect())
}
