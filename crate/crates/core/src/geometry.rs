//! Rigid-body poses, pinhole intrinsics and patch reprojection.
//!
//! Poses map world coordinates into the camera frame (`x_cam = T * x_world`).

use nalgebra::{Isometry3, Matrix3, Point3, Quaternion, Translation3, UnitQuaternion, Vector3, Vector6};

/// World-to-camera rigid transform.
pub type Pose = Isometry3<f64>;

/// Smallest homogeneous depth accepted by the projection.
pub const MIN_DEPTH: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Self {
        Self { fx, fy, cx, cy }
    }

    /// A generic camera with a ~90 degree field of view centred on the sensor.
    pub fn default_for(width: usize, height: usize) -> Self {
        let f = 0.5 * width as f64;
        Self::new(f, f, 0.5 * width as f64, 0.5 * height as f64)
    }

    /// Intrinsics in units of a map downsampled by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self::new(self.fx / factor, self.fy / factor, self.cx / factor, self.cy / factor)
    }

    /// Bearing vector with unit z for an image location.
    pub fn unproject(&self, uv: [f64; 2]) -> Vector3<f64> {
        Vector3::new((uv[0] - self.cx) / self.fx, (uv[1] - self.cy) / self.fy, 1.0)
    }

    /// Pinhole projection; `None` when the point is not in front of the camera.
    pub fn project(&self, p: &Vector3<f64>) -> Option<[f64; 2]> {
        if !(p.z > MIN_DEPTH) {
            return None;
        }
        Some([self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy])
    }
}

/// Exponential map of a twist `[v, w]` (translation first).
pub fn se3_exp(xi: &Vector6<f64>) -> Pose {
    let v = Vector3::new(xi[0], xi[1], xi[2]);
    let w = Vector3::new(xi[3], xi[4], xi[5]);
    let theta = w.norm();
    let rot = UnitQuaternion::from_scaled_axis(w);
    let wx = skew(&w);
    let vmat = if theta < 1e-10 {
        Matrix3::identity() + 0.5 * wx
    } else {
        let t2 = theta * theta;
        Matrix3::identity()
            + (1.0 - theta.cos()) / t2 * wx
            + (theta - theta.sin()) / (t2 * theta) * wx * wx
    };
    Isometry3::from_parts(Translation3::from(vmat * v), rot)
}

/// Logarithm of a rigid transform, inverse of [`se3_exp`].
pub fn se3_log(t: &Pose) -> Vector6<f64> {
    let w = t.rotation.scaled_axis();
    let theta = w.norm();
    let wx = skew(&w);
    let vinv = if theta < 1e-10 {
        Matrix3::identity() - 0.5 * wx
    } else {
        let half = 0.5 * theta;
        Matrix3::identity() - 0.5 * wx
            + (1.0 - half * half.cos() / half.sin()) / (theta * theta) * wx * wx
    };
    let v = vinv * t.translation.vector;
    Vector6::new(v.x, v.y, v.z, w.x, w.y, w.z)
}

/// Left-multiplicative retraction `exp(xi) * T`, renormalising the rotation.
pub fn retract(t: &Pose, xi: &Vector6<f64>) -> Pose {
    renormalize(&(se3_exp(xi) * t))
}

pub fn renormalize(t: &Pose) -> Pose {
    let q: Quaternion<f64> = *t.rotation.quaternion();
    Isometry3::from_parts(t.translation, UnitQuaternion::new_normalize(q))
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Relative transform taking frame-`i` camera coordinates into frame `j`.
pub fn relative(pose_i: &Pose, pose_j: &Pose) -> Pose {
    pose_j * pose_i.inverse()
}

/// Project a patch centre with inverse depth `inv_depth` from frame `i` into
/// frame `j`. `None` flags degenerate geometry (point behind the target camera).
pub fn reproject(
    center: [f64; 2],
    inv_depth: f64,
    pose_i: &Pose,
    pose_j: &Pose,
    k: &Intrinsics,
) -> Option<[f64; 2]> {
    let rel = relative(pose_i, pose_j);
    let xj = rel.rotation * k.unproject(center) + rel.translation.vector * inv_depth;
    k.project(&xj)
}

/// Position of the camera centre in world coordinates.
pub fn camera_center(pose: &Pose) -> Vector3<f64> {
    pose.inverse().translation.vector
}

/// 3D world point seen at `uv` with inverse depth `inv_depth` from `pose`.
pub fn backproject_world(uv: [f64; 2], inv_depth: f64, pose: &Pose, k: &Intrinsics) -> Point3<f64> {
    let xc = Point3::from(k.unproject(uv) / inv_depth);
    pose.inverse() * xc
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pose(rng: &mut impl Rng, scale: f64) -> Pose {
        let xi = Vector6::from_fn(|_, _| rng.random_range(-scale..scale));
        se3_exp(&xi)
    }

    #[test]
    fn exp_log_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let xi = Vector6::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let back = se3_log(&se3_exp(&xi));
            assert_relative_eq!(back, xi, epsilon = 1e-9);
        }
        let tiny = Vector6::new(1e-3, 0.0, 0.0, 1e-12, 0.0, 0.0);
        assert_relative_eq!(se3_log(&se3_exp(&tiny)), tiny, epsilon = 1e-12);
    }

    #[test]
    fn identity_motion_is_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let k = Intrinsics::new(50.0, 52.0, 30.0, 22.0);
        for _ in 0..20 {
            let p = random_pose(&mut rng, 1.0);
            let c = [rng.random_range(0.0..60.0), rng.random_range(0.0..45.0)];
            let out = reproject(c, 0.7, &p, &p, &k).unwrap();
            assert_relative_eq!(out[0], c[0], epsilon = 1e-9);
            assert_relative_eq!(out[1], c[1], epsilon = 1e-9);
        }
    }

    #[test]
    fn forward_motion_keeps_principal_point() {
        let k = Intrinsics::new(50.0, 50.0, 30.0, 22.0);
        let pi = Pose::identity();
        let pj = Isometry3::translation(0.0, 0.0, -0.3);
        let out = reproject([30.0, 22.0], 0.5, &pi, &pj, &k).unwrap();
        assert_eq!(out, [30.0, 22.0]);
    }

    /// Second implementation through explicit 3D points.
    fn reference_reproject(c: [f64; 2], rho: f64, pi: &Pose, pj: &Pose, k: &Intrinsics) -> [f64; 2] {
        let ray = [(c[0] - k.cx) / k.fx, (c[1] - k.cy) / k.fy];
        let cam_i = Point3::new(ray[0] / rho, ray[1] / rho, 1.0 / rho);
        let world = pi.inverse_transform_point(&cam_i);
        let cam_j = pj.transform_point(&world);
        [k.fx * cam_j.x / cam_j.z + k.cx, k.fy * cam_j.y / cam_j.z + k.cy]
    }

    #[test]
    fn matches_reference_reprojection() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let k = Intrinsics::new(60.0, 58.0, 32.0, 24.0);
        let mut checked = 0;
        while checked < 200 {
            let pi = random_pose(&mut rng, 0.3);
            let pj = random_pose(&mut rng, 0.3);
            let c = [rng.random_range(0.0..64.0), rng.random_range(0.0..48.0)];
            let rho = rng.random_range(0.2..2.0);
            if let Some(out) = reproject(c, rho, &pi, &pj, &k) {
                let r = reference_reproject(c, rho, &pi, &pj, &k);
                assert_relative_eq!(out[0], r[0], epsilon = 1e-9, max_relative = 1e-9);
                assert_relative_eq!(out[1], r[1], epsilon = 1e-9, max_relative = 1e-9);
                checked += 1;
            }
        }
    }

    #[test]
    fn behind_camera_is_degenerate() {
        let k = Intrinsics::new(50.0, 50.0, 30.0, 22.0);
        let pj = Isometry3::translation(0.0, 0.0, -5.0);
        assert!(reproject([30.0, 22.0], 1.0, &Pose::identity(), &pj, &k).is_none());
    }

    #[test]
    fn retraction_keeps_unit_quaternion() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut t = Pose::identity();
        for _ in 0..10_000 {
            let xi = Vector6::from_fn(|_, _| rng.random_range(-0.1..0.1));
            t = retract(&t, &xi);
        }
        assert!((t.rotation.quaternion().norm() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn backprojection_inverts_projection() {
        let k = Intrinsics::new(50.0, 50.0, 30.0, 22.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = random_pose(&mut rng, 0.5);
        let w = backproject_world([12.0, 30.0], 0.4, &p, &k);
        let uv = k.project(&p.transform_point(&w).coords).unwrap();
        assert_relative_eq!(uv[0], 12.0, epsilon = 1e-9);
        assert_relative_eq!(uv[1], 30.0, epsilon = 1e-9);
    }
}
