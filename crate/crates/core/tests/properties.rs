use nalgebra::{Isometry3, Translation3, UnitQuaternion, Vector3, Vector6};
use patchvo::costsweep::{cost_report, pareto_front, ParetoPoint};
use patchvo::evaluation::{ate, median_of_runs, trim_trajectory, umeyama_align, Sim3};
use patchvo::events::{build_voxel_grid, Event, Resolution};
use patchvo::geometry::{se3_exp, se3_log};
use patchvo::graph::{edges_per_patch, n_edges};
use patchvo::model::{model_config_from_kv, parse_kv_text, ModelConfig};
use patchvo::nn::Mat;
use patchvo::pipeline::{parse_tum, Trajectory};
use patchvo::update::scatter_softmax;
use proptest::prelude::*;

fn traj(points: &[(f64, f64, f64)]) -> Trajectory {
    let stamps = (0..points.len()).map(|i| i as f64 * 0.05).collect();
    let poses = points
        .iter()
        .map(|&(x, y, z)| Isometry3::from_parts(Translation3::new(x, y, z), UnitQuaternion::identity()))
        .collect();
    Trajectory::from_parts(stamps, poses).unwrap()
}

proptest! {
    #[test]
    fn edge_count_is_sum_over_patch_ages(n in 0u64..128, r in 0u64..40, p in 1u64..40) {
        let by_age: u64 = (0..=r).map(|a| n * edges_per_patch(a, p)).sum();
        prop_assert_eq!(n_edges(n, r, p), by_age);
    }

    #[test]
    fn costs_are_non_negative_and_consistent(n in 0usize..128, r in 1usize..30, p in 1usize..20) {
        let c = cost_report(&ModelConfig::tiny().with_graph(n, r, p)).unwrap();
        prop_assert_eq!(c.macs_per_frame, c.macs.total());
        prop_assert_eq!(c.peak_memory_bytes, c.memory.total());
        prop_assert_eq!(c.n_edges == 0, n == 0);
    }

    #[test]
    fn pareto_front_is_exactly_the_non_dominated_set(
        pts in prop::collection::vec((0u8..30, 0u8..30), 1..80)
    ) {
        let pts: Vec<ParetoPoint> = pts
            .iter()
            .enumerate()
            .map(|(i, &(x, y))| ParetoPoint { n_patches: i, removal_window: 0, patch_lifetime: 0, x: x as f64, y: y as f64 })
            .collect();
        let front = pareto_front(&pts);
        let dominated = |p: &ParetoPoint| pts.iter().any(|q| q.x <= p.x && q.y <= p.y && (q.x < p.x || q.y < p.y));
        for p in &front {
            prop_assert!(!dominated(p));
        }
        let on_front = |p: &ParetoPoint| front.iter().any(|f| f.n_patches == p.n_patches);
        for p in &pts {
            prop_assert_eq!(on_front(p), !dominated(p));
        }
        for w in front.windows(2) {
            prop_assert!(w[0].x <= w[1].x && w[0].y >= w[1].y);
        }
    }

    #[test]
    fn scatter_softmax_normalizes_each_group(
        rows in prop::collection::vec((0u64..6, prop::collection::vec(-50.0f32..50.0, 4)), 1..60)
    ) {
        let groups: Vec<u64> = rows.iter().map(|r| r.0).collect();
        let data: Vec<f32> = rows.iter().flat_map(|r| r.1.clone()).collect();
        let w = scatter_softmax(&Mat::from_vec(rows.len(), 4, data), &groups);
        for g in 0..6 {
            for c in 0..4 {
                let members: Vec<usize> = (0..rows.len()).filter(|&i| groups[i] == g).collect();
                if members.is_empty() {
                    continue;
                }
                let s: f64 = members.iter().map(|&i| w.row(i)[c] as f64).sum();
                prop_assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn se3_log_inverts_exp(v in prop::array::uniform6(-1.0f64..1.0)) {
        let xi = Vector6::from_row_slice(&v);
        let back = se3_log(&se3_exp(&xi));
        prop_assert!((back - xi).amax() < 1e-9);
    }

    #[test]
    fn tum_round_trip(points in prop::collection::vec((-100.0f64..100.0, -100.0f64..100.0, -100.0f64..100.0), 1..30),
                      angle in -3.0f64..3.0) {
        let stamps: Vec<f64> = (0..points.len()).map(|i| 1.0 + i as f64 * 0.0371).collect();
        let poses = points
            .iter()
            .map(|&(x, y, z)| Isometry3::from_parts(Translation3::new(x, y, z), UnitQuaternion::from_euler_angles(angle, 0.3, -angle)))
            .collect();
        let t = Trajectory::from_parts(stamps, poses).unwrap();
        let text = t.to_tum();
        let back = parse_tum(&text).unwrap();
        prop_assert_eq!(back.len(), t.len());
        for ((a, pa), (b, pb)) in t.iter().zip(back.iter()) {
            prop_assert!((a - b).abs() <= 1e-8 * a.abs());
            prop_assert!((pa.translation.vector - pb.translation.vector).amax() <= 1e-6);
            prop_assert!(pa.rotation.angle_to(&pb.rotation) < 1e-7);
        }
    }

    #[test]
    fn config_text_round_trip(n in 0usize..200, r in 1usize..40, p in 1usize..40, pyr: bool, gru: bool) {
        let mut cfg = ModelConfig::tiny().with_graph(n, r, p);
        cfg.use_pyr = pyr;
        cfg.use_gru = gru;
        let (back, rest) = model_config_from_kv(parse_kv_text(&cfg.to_kv_text()).unwrap()).unwrap();
        prop_assert!(rest.is_empty());
        prop_assert_eq!(back, cfg);
    }

    #[test]
    fn voxel_grid_conserves_polarity(evs in prop::collection::vec((0u64..10_000, 0u16..32, 0u16..24, any::<bool>()), 0..200),
                                     bins in 1usize..8) {
        let events: Vec<Event> = evs.iter().map(|&(t, x, y, p)| Event::new(t, x, y, if p { 1 } else { -1 })).collect();
        let g = build_voxel_grid(&events, 0, 10_000, bins, Resolution::new(32, 24)).unwrap();
        let want: f64 = events.iter().map(|e| e.polarity as f64).sum();
        prop_assert!((g.data.iter().sum::<f64>() - want).abs() < 1e-9);
    }

    #[test]
    fn alignment_never_worse_than_identity(
        a in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0, -5.0f64..5.0), 4..20),
        noise in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0), 20),
    ) {
        let gt = traj(&a);
        let est = traj(&a.iter().zip(&noise).map(|(p, n)| (p.0 + n.0, p.1 + n.1, p.2 + n.2)).collect::<Vec<_>>());
        if let Ok(s) = umeyama_align(&est, &gt, true) {
            prop_assert!(ate(&est, &gt, &s).unwrap() <= ate(&est, &gt, &Sim3::identity()).unwrap() + 1e-12);
        }
        if let Ok(s) = umeyama_align(&est, &gt, false) {
            prop_assert!((s.scale - 1.0).abs() == 0.0);
            prop_assert!(ate(&est, &gt, &s).unwrap() <= ate(&est, &gt, &Sim3::identity()).unwrap() + 1e-12);
        }
    }

    #[test]
    fn trimming_removes_at_least_the_requested_length(steps in prop::collection::vec(0.01f64..1.0, 3..40),
                                                      head in 0.0f64..1.0, tail in 0.0f64..1.0) {
        let mut x = 0.0;
        let mut pts = vec![(0.0, 0.0, 0.0)];
        for s in &steps {
            x += s;
            pts.push((x, 0.0, 0.0));
        }
        let t = traj(&pts);
        match trim_trajectory(&t, head, tail) {
            Ok(tr) => {
                let start = tr.positions()[0].x;
                let end = tr.positions()[tr.len() - 1].x;
                prop_assert!(start >= head - 1e-9);
                prop_assert!(x - end >= tail - 1e-9);
            }
            Err(_) => prop_assert!(!pts.iter().any(|q| q.0 >= head - 1e-9 && x - q.0 >= tail - 1e-9)),
        }
    }

    #[test]
    fn median_lies_within_range(v in prop::collection::vec(-1e3f64..1e3, 1..30)) {
        let m = median_of_runs(&v).unwrap();
        let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(lo <= m && m <= hi);
    }

    #[test]
    fn sim3_inverse_composes_to_identity(s in 0.1f64..10.0, r in prop::array::uniform3(-2.0f64..2.0),
                                         t in prop::array::uniform3(-10.0f64..10.0)) {
        let a = Sim3 { scale: s, rotation: UnitQuaternion::from_scaled_axis(Vector3::from(r)), translation: Vector3::from(t) };
        let id = a.compose(&a.inverse());
        prop_assert!((id.scale - 1.0).abs() < 1e-12);
        prop_assert!(id.rotation.angle() < 1e-9);
        prop_assert!(id.translation.amax() < 1e-9);
    }
}
