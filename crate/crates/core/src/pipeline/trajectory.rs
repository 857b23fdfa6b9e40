use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Isometry3, Quaternion, Translation3, UnitQuaternion, Vector3};

use crate::error::{Error, Result};
use crate::geometry::Pose;

/// Timestamped camera-to-world poses with strictly increasing timestamps.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trajectory {
    stamps: Vec<f64>,
    poses: Vec<Pose>,
}

impl Trajectory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_parts(stamps: Vec<f64>, poses: Vec<Pose>) -> Result<Self> {
        if stamps.len() != poses.len() {
            return Err(Error::Validation("timestamp and pose counts differ".into()));
        }
        let mut t = Self::new();
        for (s, p) in stamps.into_iter().zip(poses) {
            t.push(s, p)?;
        }
        Ok(t)
    }

    pub fn push(&mut self, stamp: f64, pose: Pose) -> Result<()> {
        if !stamp.is_finite() {
            return Err(Error::Validation(format!("non-finite timestamp {stamp}")));
        }
        if let Some(&last) = self.stamps.last() {
            if stamp <= last {
                return Err(Error::Validation(format!(
                    "timestamps must increase strictly: {stamp} after {last}"
                )));
            }
        }
        self.stamps.push(stamp);
        self.poses.push(pose);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.stamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stamps.is_empty()
    }

    pub fn stamps(&self) -> &[f64] {
        &self.stamps
    }

    pub fn poses(&self) -> &[Pose] {
        &self.poses
    }

    pub fn positions(&self) -> Vec<Vector3<f64>> {
        self.poses.iter().map(|p| p.translation.vector).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (f64, &Pose)> {
        self.stamps.iter().copied().zip(self.poses.iter())
    }

    /// Keep poses with index in `range`.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Trajectory {
        Trajectory {
            stamps: self.stamps[range.clone()].to_vec(),
            poses: self.poses[range].to_vec(),
        }
    }

    /// Total path length along the positions.
    pub fn path_length(&self) -> f64 {
        self.poses
            .windows(2)
            .map(|w| (w[1].translation.vector - w[0].translation.vector).norm())
            .sum()
    }

    pub fn to_tum(&self) -> String {
        let mut s = String::new();
        for (t, p) in self.iter() {
            let v = p.translation.vector;
            let q = p.rotation.quaternion();
            let fields = [t, v.x, v.y, v.z, q.i, q.j, q.k, q.w];
            let line: Vec<String> = fields.iter().map(|&x| format_sig(x, 9)).collect();
            let _ = writeln!(s, "{}", line.join(" "));
        }
        s
    }

    pub fn write_tum(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tum()).map_err(|e| Error::io(path, e))
    }

    pub fn read_tum(path: &Path) -> Result<Trajectory> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        parse_tum(&text)
    }
}

/// Parse `timestamp tx ty tz qx qy qz qw` lines; `#` comments and blank
/// lines are skipped.
pub fn parse_tum(text: &str) -> Result<Trajectory> {
    let mut traj = Trajectory::new();
    let mut offset = 0usize;
    for line in text.split_inclusive('\n') {
        let start = offset;
        offset += line.len();
        let body = line.trim();
        if body.is_empty() || body.starts_with('#') {
            continue;
        }
        let vals: std::result::Result<Vec<f64>, _> = body.split_whitespace().map(str::parse::<f64>).collect();
        let vals = vals.map_err(|e| Error::Parse {
            offset: start,
            message: format!("bad number in trajectory line: {e}"),
        })?;
        if vals.len() != 8 {
            return Err(Error::Parse {
                offset: start,
                message: format!("expected 8 fields, found {}", vals.len()),
            });
        }
        let q = Quaternion::new(vals[7], vals[4], vals[5], vals[6]);
        if !(q.norm() > 1e-12) {
            return Err(Error::Parse {
                offset: start,
                message: "zero quaternion".into(),
            });
        }
        let pose = Isometry3::from_parts(
            Translation3::new(vals[1], vals[2], vals[3]),
            UnitQuaternion::new_normalize(q),
        );
        traj.push(vals[0], pose).map_err(|e| Error::Parse {
            offset: start,
            message: e.to_string(),
        })?;
    }
    Ok(traj)
}

/// Shortest decimal rendering with `sig` significant digits, like C's `%g`.
pub fn format_sig(x: f64, sig: usize) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let sci = format!("{:.*e}", sig - 1, x);
    let (mant, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if exp < -5 || exp >= sig as i32 {
        let mant = trim_zeros(mant);
        return format!("{mant}e{exp}");
    }
    let decimals = (sig as i32 - 1 - exp).max(0) as usize;
    trim_zeros(&format!("{x:.decimals$}")).to_string()
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}
