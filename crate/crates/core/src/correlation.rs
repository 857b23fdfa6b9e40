//! Dot products between patch cells and neighbourhoods of a target frame's
//! matching features.
//!
//! Layout of one correlation feature: level-major, then lookup offset
//! (row-major over the `(2r+1)^2` window), then patch cell (row-major 3x3).

use rayon::prelude::*;

use crate::graph::{PatchGraph, RetainedFrame};
use crate::model::ModelConfig;
use crate::nn::{Mat, OpCounter};
use crate::patchifier::FeatureMap;

/// Scale between the matching-feature map and the coarse level.
pub const PYR_SCALE: f64 = 4.0;

/// Multiply-accumulates needed to correlate one edge.
pub fn corr_macs_per_edge(cfg: &ModelConfig) -> u64 {
    (cfg.corr_levels() * cfg.corr_window() * cfg.corr_window() * 9 * cfg.ch_mf) as u64
}

fn correlate_level(
    feature: &[f32],
    map: &FeatureMap,
    center: [f64; 2],
    radius: usize,
    out: &mut [f32],
) {
    let ch = map.channels;
    let r = radius as i64;
    let ext = r + 1;
    let side = (2 * ext + 1) as usize;
    let mut samples = vec![0.0f32; side * side * ch];
    for sy in -ext..=ext {
        for sx in -ext..=ext {
            let idx = ((sy + ext) as usize * side + (sx + ext) as usize) * ch;
            map.sample_bilinear(
                center[0] + sx as f64,
                center[1] + sy as f64,
                &mut samples[idx..idx + ch],
            );
        }
    }
    let norm = 1.0 / (ch as f32).sqrt();
    let mut k = 0;
    for oy in -r..=r {
        for ox in -r..=r {
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let cell = ((dy + 1) * 3 + dx + 1) as usize;
                    let pv = &feature[cell * ch..(cell + 1) * ch];
                    let s = ((oy + dy + ext) as usize * side + (ox + dx + ext) as usize) * ch;
                    let sv = &samples[s..s + ch];
                    let dot: f32 = pv.iter().zip(sv).map(|(a, b)| a * b).sum();
                    out[k] = dot * norm;
                    k += 1;
                }
            }
        }
    }
}

/// Correlation feature of one patch against a target frame around `center`
/// (feature-map coordinates). Out-of-bounds samples contribute zero.
pub fn correlate(
    feature: &[f32],
    mf: &FeatureMap,
    pyr: Option<&FeatureMap>,
    center: [f64; 2],
    radius: usize,
) -> Vec<f32> {
    let w = 2 * radius + 1;
    let per_level = w * w * 9;
    let levels = 1 + pyr.is_some() as usize;
    let mut out = vec![0.0; per_level * levels];
    correlate_into(feature, mf, pyr, center, radius, &mut out);
    out
}

pub fn correlate_into(
    feature: &[f32],
    mf: &FeatureMap,
    pyr: Option<&FeatureMap>,
    center: [f64; 2],
    radius: usize,
    out: &mut [f32],
) {
    let w = 2 * radius + 1;
    let per_level = w * w * 9;
    correlate_level(feature, mf, center, radius, &mut out[..per_level]);
    if let Some(p) = pyr {
        let c = [center[0] / PYR_SCALE, center[1] / PYR_SCALE];
        correlate_level(feature, p, c, radius, &mut out[per_level..2 * per_level]);
    }
}

/// Correlation features for every edge of `graph`, in edge order. `centers`
/// holds the lookup centre per edge; `None` marks degenerate geometry and
/// yields an all-zero row.
pub fn correlate_edges(
    graph: &PatchGraph,
    centers: &[Option<[f64; 2]>],
    cfg: &ModelConfig,
    counter: &mut OpCounter,
) -> Mat {
    let edges = graph.edges();
    assert_eq!(edges.len(), centers.len());
    let len = cfg.corr_len();
    let mut out = Mat::zeros(edges.len(), len);
    if len == 0 {
        return out;
    }
    out.data
        .par_chunks_mut(len)
        .zip(edges.par_iter().zip(centers.par_iter()))
        .for_each(|(row, (e, c))| {
            let (Some(c), Some(p), Some(f)) = (c, graph.patch(e.patch_id), graph.frame(e.target_frame_id))
            else {
                return;
            };
            correlate_frame_into(&p.feature, f, *c, cfg, row);
        });
    counter.macs += edges.len() as u64 * corr_macs_per_edge(cfg);
    out
}

fn correlate_frame_into(feature: &[f32], f: &RetainedFrame, c: [f64; 2], cfg: &ModelConfig, row: &mut [f32]) {
    let pyr = if cfg.use_pyr { f.pyr.as_ref() } else { None };
    correlate_into(feature, &f.mf, pyr, c, cfg.corr_radius, row);
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(w: usize, h: usize, c: usize, rng: &mut impl Rng) -> FeatureMap {
        let mut m = FeatureMap::zeros(w, h, c);
        m.data.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        m
    }

    #[test]
    fn lengths_follow_config() {
        let b = ModelConfig::baseline();
        let t = ModelConfig::tiny();
        assert_eq!(b.corr_len(), 882);
        assert_eq!(t.corr_len(), 441);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mf = random_map(20, 16, 4, &mut rng);
        let pyr = random_map(5, 4, 4, &mut rng);
        let f = vec![0.5; 36];
        assert_eq!(correlate(&f, &mf, Some(&pyr), [8.0, 8.0], 3).len(), 882);
        assert_eq!(correlate(&f, &mf, None, [8.0, 8.0], 3).len(), 441);
    }

    #[test]
    fn zero_patch_gives_zero_feature() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mf = random_map(20, 16, 8, &mut rng);
        let out = correlate(&[0.0; 72], &mf, None, [7.3, 6.1], 3);
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_fields_give_normalized_product() {
        let (c, p, ch) = (0.5f32, 2.0f32, 16usize);
        let mf = FeatureMap::filled(30, 30, ch, c);
        let out = correlate(&vec![p; 9 * ch], &mf, None, [15.0, 15.0], 3);
        let expected = c * p * ch as f32 / (ch as f32).sqrt();
        for v in out {
            assert!((v - expected).abs() < 1e-5, "{v} vs {expected}");
        }
    }

    #[test]
    fn bilinear_at_integers_is_indexing() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mf = random_map(9, 7, 3, &mut rng);
        let mut buf = [0.0; 3];
        for y in 0..7 {
            for x in 0..9 {
                mf.sample_bilinear(x as f64, y as f64, &mut buf);
                assert_eq!(&buf, mf.at(x, y));
            }
        }
    }

    #[test]
    fn linear_in_target_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mf = random_map(20, 16, 8, &mut rng);
        let mut scaled = mf.clone();
        scaled.data.iter_mut().for_each(|v| *v *= 2.5);
        let f: Vec<f32> = (0..72).map(|_| rng.random_range(-1.0..1.0)).collect();
        let a = correlate(&f, &mf, None, [9.4, 7.7], 3);
        let b = correlate(&f, &scaled, None, [9.4, 7.7], 3);
        for (x, y) in a.iter().zip(&b) {
            assert!((2.5 * x - y).abs() < 1e-5);
        }
    }

    /// Direct evaluation of a single entry without the shared sample grid.
    fn reference_entry(f: &[f32], m: &FeatureMap, c: [f64; 2], o: (i64, i64), cell: (i64, i64)) -> f32 {
        let ch = m.channels;
        let mut s = vec![0.0; ch];
        m.sample_bilinear(c[0] + (o.0 + cell.0) as f64, c[1] + (o.1 + cell.1) as f64, &mut s);
        let ci = ((cell.1 + 1) * 3 + cell.0 + 1) as usize;
        f[ci * ch..(ci + 1) * ch].iter().zip(&s).map(|(a, b)| a * b).sum::<f32>() / (ch as f32).sqrt()
    }

    #[test]
    fn layout_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mf = random_map(20, 16, 6, &mut rng);
        let pyr = random_map(5, 4, 6, &mut rng);
        let f: Vec<f32> = (0..54).map(|_| rng.random_range(-1.0..1.0)).collect();
        let c = [3.6, 14.2];
        let out = correlate(&f, &mf, Some(&pyr), c, 2);
        let mut k = 0;
        for (lvl, map, cc) in [(0, &mf, c), (1, &pyr, [c[0] / 4.0, c[1] / 4.0])] {
            let _ = lvl;
            for oy in -2..=2 {
                for ox in -2..=2 {
                    for dy in -1..=1 {
                        for dx in -1..=1 {
                            let r = reference_entry(&f, map, cc, (ox, oy), (dx, dy));
                            assert!((out[k] - r).abs() < 1e-5);
                            k += 1;
                        }
                    }
                }
            }
        }
        assert_eq!(k, out.len());
    }

    #[test]
    fn far_outside_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mf = random_map(10, 10, 4, &mut rng);
        let out = correlate(&[1.0; 36], &mf, None, [-50.0, 3.0], 3);
        assert!(out.iter().all(|&v| v == 0.0));
    }
}
