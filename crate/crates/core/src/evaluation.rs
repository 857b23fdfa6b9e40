//! Trajectory alignment and error metrics.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::Trajectory;

/// Default timestamp association tolerance in seconds.
pub const ASSOCIATION_TOLERANCE_S: f64 = 0.010;

/// Similarity transform `x -> s * R * x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sim3 {
    pub scale: f64,
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl Sim3 {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.scale * (self.rotation * p) + self.translation
    }

    pub fn inverse(&self) -> Sim3 {
        let r = self.rotation.inverse();
        Sim3 {
            scale: 1.0 / self.scale,
            rotation: r,
            translation: -(r * self.translation) / self.scale,
        }
    }

    /// `self` after `other`.
    pub fn compose(&self, other: &Sim3) -> Sim3 {
        Sim3 {
            scale: self.scale * other.scale,
            rotation: self.rotation * other.rotation,
            translation: self.apply(&other.translation),
        }
    }
}

/// Index pairs `(est, gt)` matched by nearest timestamp within `tol`
/// seconds; each ground-truth pose is used at most once.
pub fn associate(est: &Trajectory, gt: &Trajectory, tol: f64) -> Vec<(usize, usize)> {
    let gs = gt.stamps();
    let mut used = vec![false; gs.len()];
    let mut pairs = Vec::new();
    for (i, &t) in est.stamps().iter().enumerate() {
        let pos = gs.partition_point(|&g| g < t);
        let mut best: Option<(f64, usize)> = None;
        let mut l = pos;
        while l > 0 {
            l -= 1;
            let d = t - gs[l];
            if d > tol {
                break;
            }
            if !used[l] {
                best = Some((d, l));
                break;
            }
        }
        let mut r = pos;
        while r < gs.len() {
            let d = gs[r] - t;
            if d > tol {
                break;
            }
            if !used[r] {
                if best.is_none_or(|(bd, _)| d < bd) {
                    best = Some((d, r));
                }
                break;
            }
            r += 1;
        }
        if let Some((_, j)) = best {
            used[j] = true;
            pairs.push((i, j));
        }
    }
    pairs
}

type PointPairs = (Vec<Vector3<f64>>, Vec<Vector3<f64>>);

fn associated_positions(est: &Trajectory, gt: &Trajectory) -> Result<PointPairs> {
    let pairs = associate(est, gt, ASSOCIATION_TOLERANCE_S);
    if pairs.is_empty() {
        return Err(Error::Association(format!(
            "no estimated pose lies within {} ms of a ground-truth pose",
            ASSOCIATION_TOLERANCE_S * 1e3
        )));
    }
    let ep = est.positions();
    let gp = gt.positions();
    Ok(pairs.iter().map(|&(i, j)| (ep[i], gp[j])).unzip())
}

/// Least-squares similarity (or rigid when `with_scale` is false) mapping
/// `src` onto `dst`.
pub fn umeyama(src: &[Vector3<f64>], dst: &[Vector3<f64>], with_scale: bool) -> Result<Sim3> {
    let n = src.len();
    if n != dst.len() {
        return Err(Error::Validation("point sets differ in size".into()));
    }
    if n < 3 {
        return Err(Error::Rank(format!("{n} point pairs, at least 3 required")));
    }
    let nf = n as f64;
    let ms = src.iter().sum::<Vector3<f64>>() / nf;
    let md = dst.iter().sum::<Vector3<f64>>() / nf;
    let mut cov = Matrix3::zeros();
    let mut scatter = Matrix3::zeros();
    let mut var_s = 0.0;
    for (s, d) in src.iter().zip(dst) {
        let (a, b) = (s - ms, d - md);
        cov += b * a.transpose();
        scatter += a * a.transpose();
        var_s += a.norm_squared();
    }
    cov /= nf;
    var_s /= nf;
    let sv = scatter.symmetric_eigenvalues();
    let mut ev: Vec<f64> = sv.iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    if !(ev[0] > 0.0) || ev[1] <= 1e-12 * ev[0] {
        return Err(Error::Rank("points are coincident or collinear".into()));
    }
    let svd = cov.svd(true, true);
    let (u, vt) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
    let mut s = Matrix3::identity();
    if (u.determinant() * vt.determinant()) < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let r = u * s * vt;
    let scale = if with_scale {
        (Matrix3::from_diagonal(&svd.singular_values) * s).trace() / var_s
    } else {
        1.0
    };
    let rotation = UnitQuaternion::from_matrix(&r);
    let translation = md - scale * (rotation * ms);
    Ok(Sim3 {
        scale,
        rotation,
        translation,
    })
}

/// Alignment taking `est` positions onto `gt`.
pub fn umeyama_align(est: &Trajectory, gt: &Trajectory, with_scale: bool) -> Result<Sim3> {
    let (e, g) = associated_positions(est, gt)?;
    umeyama(&e, &g, with_scale)
}

/// Position RMSE after mapping `est` through `alignment`.
pub fn ate(est: &Trajectory, gt: &Trajectory, alignment: &Sim3) -> Result<f64> {
    let (e, g) = associated_positions(est, gt)?;
    let sq: f64 = e.iter().zip(&g).map(|(a, b)| (alignment.apply(a) - b).norm_squared()).sum();
    Ok((sq / e.len() as f64).sqrt())
}

/// Mean over datasets of the mean over sequences of `ATE / length`.
pub fn nate(per_dataset: &BTreeMap<String, Vec<(f64, f64)>>) -> Result<f64> {
    if per_dataset.is_empty() {
        return Err(Error::Validation("no datasets".into()));
    }
    let mut total = 0.0;
    for (name, seqs) in per_dataset {
        if seqs.is_empty() {
            return Err(Error::Validation(format!("dataset `{name}` has no sequences")));
        }
        let mut s = 0.0;
        for &(a, l) in seqs {
            if !(l > 0.0) {
                return Err(Error::Validation(format!("dataset `{name}`: sequence length {l} must be positive")));
            }
            s += a / l;
        }
        total += s / seqs.len() as f64;
    }
    Ok(total / per_dataset.len() as f64)
}

const TRIM_TOL: f64 = 1e-12;

/// Drop poses until `head_m` metres of path have been covered from the
/// start, and symmetrically `tail_m` from the end. The first pose whose
/// cumulative length reaches the threshold is kept.
pub fn trim_trajectory(traj: &Trajectory, head_m: f64, tail_m: f64) -> Result<Trajectory> {
    if traj.len() < 2 {
        return Err(Error::Validation("trimming needs at least two poses".into()));
    }
    if head_m < 0.0 || tail_m < 0.0 {
        return Err(Error::Validation("trim lengths must be non-negative".into()));
    }
    if head_m == 0.0 && tail_m == 0.0 {
        return Ok(traj.clone());
    }
    let p = traj.positions();
    let total = traj.path_length();
    if head_m + tail_m >= total {
        return Err(Error::Validation(format!(
            "trimming {head_m} m + {tail_m} m leaves nothing of a {total} m trajectory"
        )));
    }
    let mut start = 0;
    let mut acc = 0.0;
    while acc < head_m - TRIM_TOL {
        acc += (p[start + 1] - p[start]).norm();
        start += 1;
    }
    let mut end = p.len() - 1;
    acc = 0.0;
    while acc < tail_m - TRIM_TOL {
        acc += (p[end] - p[end - 1]).norm();
        end -= 1;
    }
    if start > end {
        return Err(Error::Validation("trimmed trajectory is empty".into()));
    }
    Ok(traj.slice(start..end + 1))
}

/// Median, averaging the two middle values for even counts.
pub fn median_of_runs(ates: &[f64]) -> Result<f64> {
    if ates.is_empty() {
        return Err(Error::Validation("median of zero runs".into()));
    }
    let mut v = ates.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Ok(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
}

/// Machine-readable evaluation summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ate_m: f64,
    pub ate_unaligned_m: f64,
    pub sequence_length_m: f64,
    pub associated_poses: usize,
    pub alignment: AlignmentSummary,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub runs: Option<RunsSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentSummary {
    pub scale: f64,
    /// `[qx, qy, qz, qw]`
    pub rotation: [f64; 4],
    pub translation: [f64; 3],
}

impl From<&Sim3> for AlignmentSummary {
    fn from(s: &Sim3) -> Self {
        let q = s.rotation.quaternion();
        Self {
            scale: s.scale,
            rotation: [q.i, q.j, q.k, q.w],
            translation: [s.translation.x, s.translation.y, s.translation.z],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunsSummary {
    pub files: Vec<String>,
    pub ates_m: Vec<f64>,
    pub median_ate_m: f64,
}

/// Align with scale and evaluate one estimate against ground truth.
pub fn evaluate(est: &Trajectory, gt: &Trajectory) -> Result<EvalReport> {
    let (e, _) = associated_positions(est, gt)?;
    let sim = umeyama_align(est, gt, true)?;
    Ok(EvalReport {
        ate_m: ate(est, gt, &sim)?,
        ate_unaligned_m: ate(est, gt, &Sim3::identity())?,
        sequence_length_m: gt.path_length(),
        associated_poses: e.len(),
        alignment: AlignmentSummary::from(&sim),
        runs: None,
    })
}

impl EvalReport {
    pub fn to_table(&self) -> String {
        let mut s = format!(
            "ATE (aligned)      {:.6} m\nATE (unaligned)    {:.6} m\nsequence length    {:.6} m\nassociated poses   {}\nscale              {:.6}\n",
            self.ate_m, self.ate_unaligned_m, self.sequence_length_m, self.associated_poses, self.alignment.scale
        );
        if let Some(r) = &self.runs {
            for (f, a) in r.files.iter().zip(&r.ates_m) {
                s.push_str(&format!("run {f:<20} {a:.6} m\n"));
            }
            s.push_str(&format!("median of {} runs  {:.6} m\n", r.ates_m.len(), r.median_ate_m));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Pose;
    use approx::assert_relative_eq;
    use nalgebra::{Isometry3, Translation3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn traj_from_points(pts: &[Vector3<f64>]) -> Trajectory {
        let stamps = (0..pts.len()).map(|i| i as f64 * 0.05).collect();
        let poses = pts
            .iter()
            .map(|p| Isometry3::from_parts(Translation3::from(*p), UnitQuaternion::identity()))
            .collect();
        Trajectory::from_parts(stamps, poses).unwrap()
    }

    fn random_points(n: usize, rng: &mut impl Rng) -> Vec<Vector3<f64>> {
        (0..n).map(|_| Vector3::from_fn(|_, _| rng.random_range(-2.0..2.0))).collect()
    }

    #[test]
    fn identical_trajectories_align_to_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = traj_from_points(&random_points(20, &mut rng));
        let s = umeyama_align(&t, &t, true).unwrap();
        assert_relative_eq!(s.scale, 1.0, epsilon = 1e-10);
        assert!(s.rotation.angle() < 1e-10);
        assert!(s.translation.norm() < 1e-10);
        assert!(ate(&t, &t, &s).unwrap() < 1e-10);
    }

    #[test]
    fn shifted_gt_unaligned_ate_is_offset() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts = random_points(10, &mut rng);
        let shifted: Vec<_> = pts.iter().map(|p| p + Vector3::x()).collect();
        let e = ate(&traj_from_points(&pts), &traj_from_points(&shifted), &Sim3::identity()).unwrap();
        assert_relative_eq!(e, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn two_points_is_rank_error() {
        let t = traj_from_points(&[Vector3::zeros(), Vector3::x()]);
        assert!(matches!(umeyama_align(&t, &t, true), Err(Error::Rank(_))));
        let line: Vec<_> = (0..5).map(|i| Vector3::x() * i as f64).collect();
        let l = traj_from_points(&line);
        assert!(matches!(umeyama_align(&l, &l, true), Err(Error::Rank(_))));
    }

    #[test]
    fn recovers_known_similarity_and_its_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts = random_points(15, &mut rng);
        let sim = Sim3 {
            scale: 2.5,
            rotation: UnitQuaternion::from_euler_angles(0.3, -0.2, 1.1),
            translation: Vector3::new(1.0, -2.0, 0.5),
        };
        let moved: Vec<_> = pts.iter().map(|p| sim.apply(p)).collect();
        let (a, b) = (traj_from_points(&pts), traj_from_points(&moved));
        let fwd = umeyama_align(&a, &b, true).unwrap();
        let back = umeyama_align(&b, &a, true).unwrap();
        assert_relative_eq!(fwd.scale, 2.5, epsilon = 1e-9);
        assert!(fwd.rotation.angle_to(&sim.rotation) < 1e-9);
        assert!((back.translation - sim.inverse().translation).norm() < 1e-9);
        assert_relative_eq!(fwd.scale * back.scale, 1.0, epsilon = 1e-9);
        assert!(ate(&a, &b, &fwd).unwrap() < 1e-9);
    }

    #[test]
    fn rigid_alignment_keeps_unit_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = traj_from_points(&random_points(15, &mut rng));
        let b = traj_from_points(&random_points(15, &mut rng));
        assert_eq!(umeyama_align(&a, &b, false).unwrap().scale, 1.0);
    }

    #[test]
    fn nate_examples() {
        let mut m = BTreeMap::new();
        m.insert("a".to_string(), vec![(1.0, 10.0)]);
        assert_relative_eq!(nate(&m).unwrap(), 0.1);
        m.insert("b".to_string(), vec![(2.0, 10.0), (4.0, 10.0)]);
        assert_relative_eq!(nate(&m).unwrap(), 0.2, epsilon = 1e-15);
        m.insert("c".to_string(), vec![(1.0, 0.0)]);
        assert!(nate(&m).is_err());
    }

    #[test]
    fn trimming_examples() {
        let pts: Vec<_> = (0..11).map(|i| Vector3::x() * (i as f64 * 0.1)).collect();
        let t = traj_from_points(&pts);
        assert_eq!(trim_trajectory(&t, 0.0, 0.0).unwrap(), t);
        let h = trim_trajectory(&t, 0.2, 0.0).unwrap();
        assert_eq!(h.len(), 9);
        assert_relative_eq!(h.positions()[0].x, 0.2, epsilon = 1e-12);
        let both = trim_trajectory(&t, 0.2, 0.3).unwrap();
        assert_eq!(both.len(), 6);
        assert!(trim_trajectory(&t, 0.5, 0.5).is_err());
        assert!(trim_trajectory(&t, 0.7, 0.4).is_err());
    }

    #[test]
    fn medians() {
        assert_eq!(median_of_runs(&[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap(), 3.0);
        assert_eq!(median_of_runs(&[5.0]).unwrap(), 5.0);
        assert_eq!(median_of_runs(&[2.0, 1.0, 4.0, 3.0]).unwrap(), 2.5);
        assert!(median_of_runs(&[]).is_err());
    }

    #[test]
    fn association_respects_tolerance_and_uniqueness() {
        let mk = |st: &[f64]| Trajectory::from_parts(st.to_vec(), vec![Pose::identity(); st.len()]).unwrap();
        let est = mk(&[0.0, 0.004, 0.5]);
        let gt = mk(&[0.001, 0.2]);
        assert_eq!(associate(&est, &gt, 0.01), vec![(0, 0)]);
        let far = mk(&[10.0]);
        assert!(matches!(ate(&far, &gt, &Sim3::identity()), Err(Error::Association(_))));
    }
}
