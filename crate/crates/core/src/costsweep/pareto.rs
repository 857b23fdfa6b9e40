use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One evaluated configuration; both axes are minimized.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParetoPoint {
    pub n_patches: usize,
    pub removal_window: usize,
    pub patch_lifetime: usize,
    pub x: f64,
    pub y: f64,
}

impl ParetoPoint {
    fn dominates(&self, o: &ParetoPoint) -> bool {
        self.x <= o.x && self.y <= o.y && (self.x < o.x || self.y < o.y)
    }
}

/// Non-dominated points sorted by increasing `x`. Points with a non-finite
/// coordinate are ignored. Exact duplicates are all kept.
pub fn pareto_front(points: &[ParetoPoint]) -> Vec<ParetoPoint> {
    let mut v: Vec<ParetoPoint> = points.iter().copied().filter(|p| p.x.is_finite() && p.y.is_finite()).collect();
    v.sort_by(|a, b| {
        a.x.total_cmp(&b.x)
            .then(a.y.total_cmp(&b.y))
            .then((a.n_patches, a.removal_window, a.patch_lifetime).cmp(&(b.n_patches, b.removal_window, b.patch_lifetime)))
    });
    let mut front: Vec<ParetoPoint> = Vec::new();
    for p in v {
        match front.last() {
            Some(best) if best.dominates(&p) => {}
            _ => front.push(p),
        }
    }
    front
}

/// Rescale both axes of `front` to `[0, 1]`. A constant axis maps to 0.
pub fn normalize(front: &[ParetoPoint]) -> Vec<ParetoPoint> {
    let bounds = |f: fn(&ParetoPoint) -> f64| {
        front.iter().map(f).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
    };
    let (x0, x1) = bounds(|p| p.x);
    let (y0, y1) = bounds(|p| p.y);
    let scale = |v: f64, lo: f64, hi: f64| if hi > lo { (v - lo) / (hi - lo) } else { 0.0 };
    front
        .iter()
        .map(|p| ParetoPoint {
            x: scale(p.x, x0, x1),
            y: scale(p.y, y0, y1),
            ..*p
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Knee {
    pub index: usize,
    pub point: ParetoPoint,
    /// Perpendicular distance to the chord through the front's end points.
    pub distance: f64,
    /// Set when every interior point lies on the chord.
    pub degenerate: bool,
}

/// Point of a front (sorted by `x`) farthest from the line through its first
/// and last points. Ties go to the smaller `x`.
pub fn knee_point(front: &[ParetoPoint]) -> Result<Knee> {
    if front.len() < 3 {
        return Err(Error::Validation(format!("knee needs at least 3 front points, got {}", front.len())));
    }
    let (a, b) = (front[0], front[front.len() - 1]);
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    let len = dx.hypot(dy);
    if !(len > 0.0) {
        return Err(Error::Validation("front end points coincide".into()));
    }
    let mut best = (1, f64::NEG_INFINITY);
    for (i, p) in front.iter().enumerate().take(front.len() - 1).skip(1) {
        let d = (dx * (p.y - a.y) - dy * (p.x - a.x)).abs() / len;
        let better = d > best.1 || (d == best.1 && p.x < front[best.0].x);
        if better {
            best = (i, d);
        }
    }
    let scale = front.iter().map(|p| p.x.abs().max(p.y.abs())).fold(0.0, f64::max).max(1.0);
    let degenerate = best.1 <= 1e-12 * scale;
    Ok(Knee {
        index: best.0,
        point: front[best.0],
        distance: if degenerate { 0.0 } else { best.1 },
        degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pt(x: f64, y: f64) -> ParetoPoint {
        ParetoPoint {
            n_patches: 0,
            removal_window: 0,
            patch_lifetime: 0,
            x,
            y,
        }
    }

    #[test]
    fn dominated_points_removed() {
        let f = pareto_front(&[pt(1.0, 5.0), pt(2.0, 3.0), pt(3.0, 4.0), pt(4.0, 1.0), pt(2.0, 3.0)]);
        let xy: Vec<_> = f.iter().map(|p| (p.x, p.y)).collect();
        assert_eq!(xy, vec![(1.0, 5.0), (2.0, 3.0), (2.0, 3.0), (4.0, 1.0)]);
    }

    #[test]
    fn same_x_keeps_lowest_y() {
        let f = pareto_front(&[pt(1.0, 2.0), pt(1.0, 1.0)]);
        assert_eq!(f.len(), 1);
        assert_eq!(f[0].y, 1.0);
    }

    #[test]
    fn knee_of_l_shape() {
        let k = knee_point(&[pt(0.0, 1.0), pt(0.1, 0.1), pt(0.5, 0.05), pt(1.0, 0.0)]).unwrap();
        assert_eq!(k.index, 1);
        assert!(!k.degenerate);
    }

    #[test]
    fn collinear_front_is_degenerate() {
        let k = knee_point(&[pt(0.0, 1.0), pt(0.5, 0.5), pt(1.0, 0.0)]).unwrap();
        assert!(k.degenerate);
        assert_eq!(k.distance, 0.0);
    }

    #[test]
    fn short_or_collapsed_fronts_error() {
        assert!(knee_point(&[pt(0.0, 1.0), pt(1.0, 0.0)]).is_err());
        assert!(knee_point(&[pt(1.0, 1.0), pt(0.5, 1.0), pt(1.0, 1.0)]).is_err());
    }

    #[test]
    fn knee_tie_prefers_smaller_x() {
        let k = knee_point(&[pt(0.0, 1.0), pt(0.25, 0.25), pt(0.75, -0.25), pt(1.0, 0.0)]).unwrap();
        assert_eq!(k.index, 1);
    }
}
