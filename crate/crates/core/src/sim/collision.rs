use serde::{Deserialize, Serialize};

use crate::geometry::Vec2;
use crate::store::AgentId;

/// Footprint rectangle rotated by `heading`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrientedBox {
    pub center: Vec2,
    pub heading: f64,
    pub length: f64,
    pub width: f64,
}

impl OrientedBox {
    pub fn axes(&self) -> [Vec2; 2] {
        let u = Vec2::from_angle(self.heading);
        [u, u.perp()]
    }

    pub fn corners(&self) -> [Vec2; 4] {
        let [u, n] = self.axes();
        let (hl, hw) = (self.length / 2.0, self.width / 2.0);
        [
            self.center + u * hl + n * hw,
            self.center + u * hl - n * hw,
            self.center - u * hl - n * hw,
            self.center - u * hl + n * hw,
        ]
    }

    pub fn contains(&self, p: Vec2) -> bool {
        let [u, n] = self.axes();
        let d = p - self.center;
        d.dot(u).abs() <= self.length / 2.0 && d.dot(n).abs() <= self.width / 2.0
    }

    /// Separating-axis test over the four edge normals. Touching counts.
    pub fn overlaps(&self, other: &OrientedBox) -> bool {
        let (ca, cb) = (self.corners(), other.corners());
        for axis in self.axes().into_iter().chain(other.axes()) {
            let (amin, amax) = extent(&ca, axis);
            let (bmin, bmax) = extent(&cb, axis);
            if amax < bmin || bmax < amin {
                return false;
            }
        }
        true
    }
}

fn extent(pts: &[Vec2; 4], axis: Vec2) -> (f64, f64) {
    pts.iter().map(|p| p.dot(axis)).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)))
}

/// All overlapping pairs, each as `(smaller id, larger id)`, sorted.
pub fn detect_collisions(boxes: &[(AgentId, OrientedBox)]) -> Vec<(AgentId, AgentId)> {
    let mut out = Vec::new();
    for (i, (a, ba)) in boxes.iter().enumerate() {
        for (b, bb) in &boxes[i + 1..] {
            if ba.overlaps(bb) {
                out.push(((*a).min(*b), (*a).max(*b)));
            }
        }
    }
    out.sort_unstable();
    out
}
