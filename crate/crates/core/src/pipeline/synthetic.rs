use nalgebra::{Isometry3, Point3, Translation3, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::trajectory::Trajectory;
use crate::error::Result;
use crate::events::{voxelize_stream, Event, EventVoxelGrid, Resolution, WindowPolicy};
use crate::geometry::{Intrinsics, Pose};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Motion {
    Static,
    /// Sideways translation with a slow vertical bob and yaw.
    Lateral,
    /// Translation along the optical axis.
    Forward,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub landmarks: usize,
    pub window_us: u64,
    /// Events emitted per visible landmark per window.
    pub samples_per_window: usize,
    pub motion: Motion,
    /// Camera speed in metres per second.
    pub speed: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            width: 240,
            height: 180,
            frames: 20,
            landmarks: 400,
            window_us: 50_000,
            samples_per_window: 4,
            motion: Motion::Lateral,
            speed: 0.5,
            seed: 0,
        }
    }
}

/// Landmarks viewed by a camera on a known trajectory.
#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub spec: SceneSpec,
    /// Pixel intrinsics.
    pub intrinsics: Intrinsics,
    pub landmarks: Vec<Point3<f64>>,
    pub polarity: Vec<i8>,
}

impl SyntheticScene {
    pub fn generate(spec: SceneSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let intrinsics = Intrinsics::default_for(spec.width, spec.height);
        let mut landmarks = Vec::with_capacity(spec.landmarks);
        let mut polarity = Vec::with_capacity(spec.landmarks);
        for _ in 0..spec.landmarks {
            let z = rng.random_range(2.0..6.0);
            let x = rng.random_range(-1.2..1.2) * z;
            let y = rng.random_range(-0.9..0.9) * z;
            landmarks.push(Point3::new(x, y, z));
            polarity.push(if rng.random_bool(0.5) { 1 } else { -1 });
        }
        Self {
            spec,
            intrinsics,
            landmarks,
            polarity,
        }
    }

    /// World-to-camera pose at time `t` seconds.
    pub fn pose_at(&self, t: f64) -> Pose {
        let s = self.spec.speed;
        let (c, yaw) = match self.spec.motion {
            Motion::Static => (Vector3::zeros(), 0.0),
            Motion::Lateral => (
                Vector3::new(s * t, 0.05 * (2.0 * t).sin(), 0.0),
                0.05 * (1.5 * t).sin(),
            ),
            Motion::Forward => (Vector3::new(0.0, 0.0, s * t), 0.0),
        };
        let cam_to_world = Isometry3::from_parts(
            Translation3::from(c),
            UnitQuaternion::from_euler_angles(0.0, yaw, 0.0),
        );
        cam_to_world.inverse()
    }

    fn window_mid(&self, frame: usize) -> f64 {
        (frame as f64 + 0.5) * self.spec.window_us as f64 * 1e-6
    }

    /// World-to-camera ground-truth pose per frame (at the window centre).
    pub fn gt_poses(&self) -> Vec<Pose> {
        (0..self.spec.frames).map(|i| self.pose_at(self.window_mid(i))).collect()
    }

    pub fn ground_truth(&self) -> Trajectory {
        let stamps = (0..self.spec.frames).map(|i| self.window_mid(i)).collect();
        let poses = self.gt_poses().iter().map(|p| p.inverse()).collect();
        Trajectory::from_parts(stamps, poses).expect("increasing stamps")
    }

    pub fn project(&self, pose: &Pose, landmark: usize) -> Option<[f64; 2]> {
        let pc = pose.transform_point(&self.landmarks[landmark]);
        let uv = self.intrinsics.project(&pc.coords)?;
        let inside = uv[0] >= 0.0
            && uv[1] >= 0.0
            && uv[0] < self.spec.width as f64
            && uv[1] < self.spec.height as f64;
        inside.then_some(uv)
    }

    /// Event stream: each visible landmark fires at evenly spaced instants
    /// of every window at its rounded projection.
    pub fn events(&self) -> Vec<Event> {
        let w = self.spec.window_us;
        let k = self.spec.samples_per_window.max(1) as u64;
        let mut out = Vec::new();
        for f in 0..self.spec.frames as u64 {
            for s in 0..k {
                let t = f * w + s * w / k;
                let pose = self.pose_at(t as f64 * 1e-6);
                for l in 0..self.landmarks.len() {
                    if let Some(uv) = self.project(&pose, l) {
                        let x = (uv[0].round() as usize).min(self.spec.width - 1);
                        let y = (uv[1].round() as usize).min(self.spec.height - 1);
                        out.push(Event::new(t, x as u16, y as u16, self.polarity[l]));
                    }
                }
            }
        }
        out.sort();
        out
    }

    pub fn windowing(&self) -> WindowPolicy {
        WindowPolicy::FixedDuration(self.spec.window_us)
    }

    pub fn voxel_grids(&self, bins: usize) -> Result<Vec<EventVoxelGrid>> {
        voxelize_stream(
            &self.events(),
            self.windowing(),
            bins,
            Resolution::new(self.spec.width, self.spec.height),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_grid_per_frame_and_stamps_align() {
        let scene = SyntheticScene::generate(SceneSpec {
            frames: 6,
            landmarks: 50,
            ..Default::default()
        });
        let grids = scene.voxel_grids(5).unwrap();
        assert_eq!(grids.len(), 6);
        let gt = scene.ground_truth();
        for (g, t) in grids.iter().zip(gt.stamps()) {
            assert!((g.timestamp_s() - t).abs() < 1e-9);
        }
    }

    #[test]
    fn static_scene_repeats_grids() {
        let scene = SyntheticScene::generate(SceneSpec {
            frames: 3,
            landmarks: 50,
            motion: Motion::Static,
            ..Default::default()
        });
        let g = scene.voxel_grids(5).unwrap();
        assert_eq!(g[0].data, g[1].data);
        assert_eq!(g[1].data, g[2].data);
    }

    #[test]
    fn deterministic() {
        let spec = SceneSpec {
            frames: 2,
            landmarks: 30,
            ..Default::default()
        };
        assert_eq!(SyntheticScene::generate(spec.clone()).events(), SyntheticScene::generate(spec).events());
    }
}
