//! Bundle adjustment over poses and patch inverse depths.
//!
//! Residuals are reprojection errors against per-edge targets in feature
//! pixels, robustified with a Huber loss and weighted by edge confidence.
//! Pose increments are left-multiplicative twists `[v, w]` on the
//! world-to-camera transforms. The normal equations are reduced onto the
//! poses with a Schur complement over the (diagonal) inverse-depth block.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, Matrix2x6, Matrix3, Matrix3x6, Vector2, Vector3, Vector6};

use crate::error::{Error, Result};
use crate::geometry::{relative, retract, skew, Intrinsics, Pose, MIN_DEPTH};
use crate::nn::OpCounter;

pub const MIN_INV_DEPTH: f64 = 1e-4;
pub const MAX_INV_DEPTH: f64 = 1e4;
/// Lower bound used when scaling the damping by the Hessian diagonal.
pub const DAMPING_FLOOR: f64 = 1e-6;

/// Estimated multiply-accumulates per term for residual, Jacobians and
/// normal-equation accumulation.
pub const BA_TERM_LINEARIZE_MACS: u64 = 256;
/// Estimated multiply-accumulates per term for a trial cost evaluation.
pub const BA_TERM_EVAL_MACS: u64 = 24;

/// One reprojection term: a patch observed from its own frame `frame_i`
/// and predicted at `target` in `frame_j`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaTerm {
    /// Index into [`BaProblem::inv_depths`].
    pub patch: usize,
    pub frame_i: u64,
    pub frame_j: u64,
    pub center: [f64; 2],
    pub target: [f64; 2],
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaProblem {
    pub intrinsics: Intrinsics,
    pub poses: BTreeMap<u64, Pose>,
    /// Frames whose poses are optimized; every other pose is held fixed.
    pub free_frames: Vec<u64>,
    pub inv_depths: Vec<f64>,
    pub terms: Vec<BaTerm>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaOptions {
    pub iterations: usize,
    pub lambda0: f64,
    pub huber_delta: f64,
}

impl Default for BaOptions {
    fn default() -> Self {
        Self {
            iterations: 2,
            lambda0: 1e-4,
            huber_delta: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LmStep {
    pub lambda: f64,
    pub cost_before: f64,
    pub cost_trial: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaReport {
    pub poses: BTreeMap<u64, Pose>,
    pub inv_depths: Vec<f64>,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub steps: Vec<LmStep>,
}

/// Partial derivatives of a term's projection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TermJacobians {
    pub projection: [f64; 2],
    pub d_pose_i: Matrix2x6<f64>,
    pub d_pose_j: Matrix2x6<f64>,
    pub d_inv_depth: Vector2<f64>,
}

/// Residual `reproject(center) - target`, `None` for degenerate geometry.
pub fn reprojection_residual(
    center: [f64; 2],
    inv_depth: f64,
    pose_i: &Pose,
    pose_j: &Pose,
    k: &Intrinsics,
    target: [f64; 2],
) -> Option<[f64; 2]> {
    let p = crate::geometry::reproject(center, inv_depth, pose_i, pose_j, k)?;
    Some([p[0] - target[0], p[1] - target[1]])
}

/// Analytic Jacobians of the projection with respect to left twists on both
/// poses and to the inverse depth.
pub fn jacobians(
    center: [f64; 2],
    inv_depth: f64,
    pose_i: &Pose,
    pose_j: &Pose,
    k: &Intrinsics,
) -> Option<TermJacobians> {
    let rel = relative(pose_i, pose_j);
    let r = rel.rotation.to_rotation_matrix().into_inner();
    let t = rel.translation.vector;
    let xbar = k.unproject(center);
    let xj = r * xbar + t * inv_depth;
    if !(xj.z > MIN_DEPTH) {
        return None;
    }
    let z = xj.z;
    let dproj = nalgebra::Matrix2x3::new(
        k.fx / z,
        0.0,
        -k.fx * xj.x / (z * z),
        0.0,
        k.fy / z,
        -k.fy * xj.y / (z * z),
    );
    let mut dxj = Matrix3x6::zeros();
    dxj.fixed_view_mut::<3, 3>(0, 0).copy_from(&(Matrix3::identity() * inv_depth));
    dxj.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-skew(&xj)));
    let mut dxi = Matrix3x6::zeros();
    dxi.fixed_view_mut::<3, 3>(0, 0).copy_from(&(Matrix3::identity() * inv_depth));
    dxi.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-skew(&xbar)));
    let dxi = -r * dxi;
    Some(TermJacobians {
        projection: [k.fx * xj.x / z + k.cx, k.fy * xj.y / z + k.cy],
        d_pose_i: dproj * dxi,
        d_pose_j: dproj * dxj,
        d_inv_depth: dproj * Vector3::from(t),
    })
}

fn huber(sq: f64, delta: f64) -> f64 {
    let n = sq.sqrt();
    if n <= delta {
        sq
    } else {
        2.0 * delta * n - delta * delta
    }
}

fn huber_weight(sq: f64, delta: f64) -> f64 {
    let n = sq.sqrt();
    if n <= delta {
        1.0
    } else {
        delta / n
    }
}

/// Damped normal equations split into pose (`b`), coupling (`e`) and the
/// diagonal inverse-depth block (`c`).
#[derive(Debug, Clone, PartialEq)]
pub struct NormalEquations {
    pub b: DMatrix<f64>,
    pub e: DMatrix<f64>,
    pub c: DVector<f64>,
    pub g_pose: DVector<f64>,
    pub g_depth: DVector<f64>,
}

impl NormalEquations {
    fn damped(&self, lambda: f64) -> (DMatrix<f64>, DVector<f64>) {
        let mut b = self.b.clone();
        for i in 0..b.nrows() {
            b[(i, i)] += lambda * b[(i, i)].max(DAMPING_FLOOR);
        }
        let c = self.c.map(|v| v + lambda * v.max(DAMPING_FLOOR));
        (b, c)
    }

    /// Solve `(H + damping) [dp; dd] = -g` by eliminating the depths.
    pub fn solve_schur(&self, lambda: f64) -> Result<(DVector<f64>, DVector<f64>)> {
        let (b, c) = self.damped(lambda);
        let cinv = c.map(|v| 1.0 / v);
        let np = b.nrows();
        let dp = if np > 0 {
            let mut ec = self.e.clone();
            for (j, mut col) in ec.column_iter_mut().enumerate() {
                col *= cinv[j];
            }
            let s = &b - &ec * self.e.transpose();
            let rhs = -&self.g_pose + &ec * &self.g_depth;
            let chol = s.cholesky().ok_or_else(|| {
                Error::Solver(format!(
                    "reduced camera system ({np}x{np}) not positive definite at lambda {lambda:e}"
                ))
            })?;
            chol.solve(&rhs)
        } else {
            DVector::zeros(0)
        };
        let dd = DVector::from_fn(c.len(), |j, _| {
            cinv[j] * (-self.g_depth[j] - self.e.column(j).dot(&dp))
        });
        Ok((dp, dd))
    }

    /// Reference solve on the full damped system.
    pub fn solve_dense(&self, lambda: f64) -> Result<(DVector<f64>, DVector<f64>)> {
        let (b, c) = self.damped(lambda);
        let (np, nd) = (b.nrows(), c.len());
        let mut h = DMatrix::zeros(np + nd, np + nd);
        h.view_mut((0, 0), (np, np)).copy_from(&b);
        h.view_mut((0, np), (np, nd)).copy_from(&self.e);
        h.view_mut((np, 0), (nd, np)).copy_from(&self.e.transpose());
        for j in 0..nd {
            h[(np + j, np + j)] = c[j];
        }
        let mut g = DVector::zeros(np + nd);
        g.rows_mut(0, np).copy_from(&self.g_pose);
        g.rows_mut(np, nd).copy_from(&self.g_depth);
        let x = h
            .cholesky()
            .ok_or_else(|| Error::Solver("full normal equations not positive definite".into()))?
            .solve(&(-g));
        Ok((x.rows(0, np).into_owned(), x.rows(np, nd).into_owned()))
    }
}

struct State {
    poses: BTreeMap<u64, Pose>,
    depths: Vec<f64>,
}

impl BaProblem {
    fn validate(&self) -> Result<()> {
        if self.terms.is_empty() {
            return Err(Error::Validation("bundle adjustment needs at least one term".into()));
        }
        if self.free_frames.len() >= self.poses.len() {
            return Err(Error::Validation("no fixed gauge pose".into()));
        }
        for t in &self.terms {
            if t.patch >= self.inv_depths.len()
                || !self.poses.contains_key(&t.frame_i)
                || !self.poses.contains_key(&t.frame_j)
            {
                return Err(Error::Validation("term references unknown patch or frame".into()));
            }
        }
        for f in &self.free_frames {
            if !self.poses.contains_key(f) {
                return Err(Error::Validation(format!("free frame {f} has no pose")));
            }
        }
        Ok(())
    }

    fn residual(&self, s: &State, t: &BaTerm) -> Option<[f64; 2]> {
        reprojection_residual(
            t.center,
            s.depths[t.patch],
            &s.poses[&t.frame_i],
            &s.poses[&t.frame_j],
            &self.intrinsics,
            t.target,
        )
    }

    /// Robust cost over `active` terms; `None` when an active term turned
    /// degenerate.
    fn cost(&self, s: &State, active: &[bool], delta: f64) -> Option<f64> {
        let mut c = 0.0;
        for (t, &a) in self.terms.iter().zip(active) {
            if !a {
                continue;
            }
            let r = self.residual(s, t)?;
            c += t.weight * huber(r[0] * r[0] + r[1] * r[1], delta);
        }
        Some(c)
    }

    /// Normal equations at the current state for the active terms.
    pub fn linearize(&self, delta: f64) -> NormalEquations {
        let s = State {
            poses: self.poses.clone(),
            depths: self.inv_depths.clone(),
        };
        let active: Vec<bool> = self.terms.iter().map(|t| self.residual(&s, t).is_some()).collect();
        self.linearize_at(&s, &active, delta)
    }

    fn linearize_at(&self, s: &State, active: &[bool], delta: f64) -> NormalEquations {
        let index: BTreeMap<u64, usize> =
            self.free_frames.iter().enumerate().map(|(i, &f)| (f, i)).collect();
        let np = 6 * self.free_frames.len();
        let nd = self.inv_depths.len();
        let mut ne = NormalEquations {
            b: DMatrix::zeros(np, np),
            e: DMatrix::zeros(np, nd),
            c: DVector::zeros(nd),
            g_pose: DVector::zeros(np),
            g_depth: DVector::zeros(nd),
        };
        for (t, &a) in self.terms.iter().zip(active) {
            if !a {
                continue;
            }
            let Some(jac) = jacobians(
                t.center,
                s.depths[t.patch],
                &s.poses[&t.frame_i],
                &s.poses[&t.frame_j],
                &self.intrinsics,
            ) else {
                continue;
            };
            let r = Vector2::new(jac.projection[0] - t.target[0], jac.projection[1] - t.target[1]);
            let w = t.weight * huber_weight(r.norm_squared(), delta);
            let mut blocks: Vec<(usize, Matrix2x6<f64>)> = Vec::with_capacity(2);
            if t.frame_i != t.frame_j {
                if let Some(&i) = index.get(&t.frame_i) {
                    blocks.push((i, jac.d_pose_i));
                }
                if let Some(&j) = index.get(&t.frame_j) {
                    blocks.push((j, jac.d_pose_j));
                }
            }
            let jd = jac.d_inv_depth;
            let k = t.patch;
            for &(a, ja) in &blocks {
                let ga: Vector6<f64> = ja.transpose() * r * w;
                for q in 0..6 {
                    ne.g_pose[6 * a + q] += ga[q];
                }
                let ea: Vector6<f64> = ja.transpose() * jd * w;
                for q in 0..6 {
                    ne.e[(6 * a + q, k)] += ea[q];
                }
                for &(b, jb) in &blocks {
                    let hab = ja.transpose() * jb * w;
                    let mut view = ne.b.view_mut((6 * a, 6 * b), (6, 6));
                    view += hab;
                }
            }
            ne.c[k] += w * jd.norm_squared();
            ne.g_depth[k] += w * jd.dot(&r);
        }
        ne
    }

    fn apply(&self, s: &State, dp: &DVector<f64>, dd: &DVector<f64>) -> State {
        let mut poses = s.poses.clone();
        for (i, f) in self.free_frames.iter().enumerate() {
            let xi = Vector6::from_fn(|q, _| dp[6 * i + q]);
            let p = poses.get_mut(f).expect("validated");
            *p = retract(p, &xi);
        }
        let depths = s
            .depths
            .iter()
            .zip(dd.iter())
            .map(|(d, x)| (d + x).clamp(MIN_INV_DEPTH, MAX_INV_DEPTH))
            .collect();
        State { poses, depths }
    }

    /// Count of terms touching each depth variable.
    fn terms_per_patch(&self) -> Vec<u64> {
        let mut k = vec![0u64; self.inv_depths.len()];
        for t in &self.terms {
            k[t.patch] += 1;
        }
        k
    }
}

/// Estimated multiply-accumulates of one LM iteration.
pub fn ba_iteration_macs(n_terms: u64, terms_per_patch: impl IntoIterator<Item = u64>, free_poses: u64) -> u64 {
    let schur: u64 = terms_per_patch.into_iter().map(|k| 36 * k * k).sum();
    let n = 6 * free_poses;
    n_terms * (BA_TERM_LINEARIZE_MACS + BA_TERM_EVAL_MACS) + schur + n * n * n / 6 + n * n
}

/// Levenberg-Marquardt with one linearization, one solve and one trial per
/// iteration. Terms degenerate at the start are ignored for the whole call;
/// trial steps that make an active term degenerate are rejected.
pub fn ba_solve(problem: &BaProblem, opts: &BaOptions, counter: &mut OpCounter) -> Result<BaReport> {
    problem.validate()?;
    let delta = opts.huber_delta;
    let mut s = State {
        poses: problem.poses.clone(),
        depths: problem.inv_depths.clone(),
    };
    let active: Vec<bool> = problem.terms.iter().map(|t| problem.residual(&s, t).is_some()).collect();
    let mut cost = problem.cost(&s, &active, delta).expect("active terms are valid");
    if !cost.is_finite() {
        return Err(Error::Numeric { block: "ba".into() });
    }
    let initial_cost = cost;
    let per_iter = ba_iteration_macs(
        problem.terms.len() as u64,
        problem.terms_per_patch(),
        problem.free_frames.len() as u64,
    );
    let mut lambda = opts.lambda0;
    let mut steps = Vec::with_capacity(opts.iterations);
    for _ in 0..opts.iterations {
        counter.macs += per_iter;
        let ne = problem.linearize_at(&s, &active, delta);
        let (dp, dd) = ne.solve_schur(lambda)?;
        if dp.iter().chain(dd.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Numeric { block: "ba".into() });
        }
        let trial = problem.apply(&s, &dp, &dd);
        let trial_cost = problem.cost(&trial, &active, delta);
        let accepted = matches!(trial_cost, Some(c) if c.is_finite() && c <= cost);
        steps.push(LmStep {
            lambda,
            cost_before: cost,
            cost_trial: trial_cost.unwrap_or(f64::INFINITY),
            accepted,
        });
        if accepted {
            cost = trial_cost.expect("accepted");
            s = trial;
            lambda /= 3.0;
        } else {
            lambda *= 10.0;
        }
    }
    Ok(BaReport {
        poses: s.poses,
        inv_depths: s.depths,
        initial_cost,
        final_cost: cost,
        steps,
    })
}
