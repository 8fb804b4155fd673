//! Planar geometry shared by every module: points, rigid frames, oriented boxes.

use std::f64::consts::PI;
use std::ops::{Add, AddAssign, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn from_angle(theta: f64) -> Self {
        Self::new(theta.cos(), theta.sin())
    }

    pub fn dot(self, o: Vec2) -> f64 {
        self.x * o.x + self.y * o.y
    }

    pub fn cross(self, o: Vec2) -> f64 {
        self.x * o.y - self.y * o.x
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn dist(self, o: Vec2) -> f64 {
        (self - o).norm()
    }

    /// Counter-clockwise rotation by `theta` radians.
    pub fn rotate(self, theta: f64) -> Vec2 {
        let (s, c) = theta.sin_cos();
        Vec2::new(c * self.x - s * self.y, s * self.x + c * self.y)
    }

    /// Left-hand normal (rotated +90 degrees).
    pub fn perp(self) -> Vec2 {
        Vec2::new(-self.y, self.x)
    }

    pub fn angle(self) -> f64 {
        self.y.atan2(self.x)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }
}

impl AddAssign for Vec2 {
    fn add_assign(&mut self, o: Vec2) {
        self.x += o.x;
        self.y += o.y;
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }
}

impl Mul<f64> for Vec2 {
    type Output = Vec2;
    fn mul(self, k: f64) -> Vec2 {
        Vec2::new(self.x * k, self.y * k)
    }
}

impl Neg for Vec2 {
    type Output = Vec2;
    fn neg(self) -> Vec2 {
        Vec2::new(-self.x, -self.y)
    }
}

/// Wraps an angle into (-pi, pi].
pub fn wrap_angle(theta: f64) -> f64 {
    let mut a = theta % (2.0 * PI);
    if a <= -PI {
        a += 2.0 * PI;
    } else if a > PI {
        a -= 2.0 * PI;
    }
    a
}

/// Rigid transform from a local (agent-centric) frame into its parent frame:
/// `parent = origin + R(heading) * local`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub origin: Vec2,
    pub heading: f64,
}

impl Default for Frame {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl Frame {
    pub const IDENTITY: Frame = Frame { origin: Vec2::ZERO, heading: 0.0 };

    pub fn new(origin: Vec2, heading: f64) -> Self {
        Self { origin, heading: wrap_angle(heading) }
    }

    pub fn to_parent(&self, p: Vec2) -> Vec2 {
        self.origin + p.rotate(self.heading)
    }

    pub fn to_local(&self, p: Vec2) -> Vec2 {
        (p - self.origin).rotate(-self.heading)
    }

    pub fn dir_to_parent(&self, v: Vec2) -> Vec2 {
        v.rotate(self.heading)
    }

    pub fn dir_to_local(&self, v: Vec2) -> Vec2 {
        v.rotate(-self.heading)
    }

    pub fn heading_to_local(&self, h: f64) -> f64 {
        wrap_angle(h - self.heading)
    }

    /// `self ∘ inner`: maps inner-local coordinates straight to this frame's parent.
    pub fn compose(&self, inner: &Frame) -> Frame {
        Frame::new(self.to_parent(inner.origin), self.heading + inner.heading)
    }
}

/// Rectangle centered at `center`, long side along `heading`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrientedBox {
    pub center: Vec2,
    pub heading: f64,
    pub length: f64,
    pub width: f64,
}

impl OrientedBox {
    pub fn corners(&self) -> [Vec2; 4] {
        let f = Vec2::from_angle(self.heading) * (0.5 * self.length);
        let l = Vec2::from_angle(self.heading).perp() * (0.5 * self.width);
        [self.center + f + l, self.center - f + l, self.center - f - l, self.center + f - l]
    }

    /// Separating-axis test. Touching boxes count as overlapping.
    pub fn overlaps(&self, other: &OrientedBox) -> bool {
        let a = self.corners();
        let b = other.corners();
        let axes = [
            Vec2::from_angle(self.heading),
            Vec2::from_angle(self.heading).perp(),
            Vec2::from_angle(other.heading),
            Vec2::from_angle(other.heading).perp(),
        ];
        for axis in axes {
            let (amin, amax) = project(&a, axis);
            let (bmin, bmax) = project(&b, axis);
            if amax < bmin || bmax < amin {
                return false;
            }
        }
        true
    }
}

fn project(pts: &[Vec2; 4], axis: Vec2) -> (f64, f64) {
    pts.iter().map(|p| p.dot(axis)).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

/// Simple polygon (implicitly closed).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Polygon {
    pub points: Vec<Vec2>,
}

impl Polygon {
    pub fn new(points: Vec<Vec2>) -> Self {
        Self { points }
    }

    pub fn rect(xmin: f64, ymin: f64, xmax: f64, ymax: f64) -> Self {
        Self::new(vec![Vec2::new(xmin, ymin), Vec2::new(xmax, ymin), Vec2::new(xmax, ymax), Vec2::new(xmin, ymax)])
    }

    /// Even-odd crossing test; points on an edge (within 1e-9 m) are inside.
    pub fn contains(&self, p: Vec2) -> bool {
        let n = self.points.len();
        if n < 3 {
            return false;
        }
        let mut inside = false;
        for i in 0..n {
            let a = self.points[i];
            let b = self.points[(i + 1) % n];
            if point_segment_distance(p, a, b) <= 1e-9 {
                return true;
            }
            if (a.y > p.y) != (b.y > p.y) {
                let x = a.x + (p.y - a.y) * (b.x - a.x) / (b.y - a.y);
                if p.x < x {
                    inside = !inside;
                }
            }
        }
        inside
    }
}

pub fn point_segment_distance(p: Vec2, a: Vec2, b: Vec2) -> f64 {
    let ab = b - a;
    let len2 = ab.dot(ab);
    if len2 == 0.0 {
        return p.dist(a);
    }
    let t = ((p - a).dot(ab) / len2).clamp(0.0, 1.0);
    p.dist(a + ab * t)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wrap_angle_range() {
        assert_eq!(wrap_angle(PI), PI);
        assert!((wrap_angle(-PI) - PI).abs() < 1e-15);
        assert!((wrap_angle(3.0 * PI) - PI).abs() < 1e-12);
        assert!((wrap_angle(0.25) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn frame_round_trip() {
        let f = Frame::new(Vec2::new(10.0, 5.0), PI / 2.0);
        let p = Vec2::new(1.0, 0.0);
        let w = f.to_parent(p);
        assert!((w.x - 10.0).abs() < 1e-12 && (w.y - 6.0).abs() < 1e-12);
        let back = f.to_local(w);
        assert!(back.dist(p) < 1e-12);
    }

    #[test]
    fn compose_matches_sequential_application() {
        let outer = Frame::new(Vec2::new(3.0, -2.0), 0.7);
        let inner = Frame::new(Vec2::new(-1.0, 4.0), -2.1);
        let p = Vec2::new(0.3, 0.9);
        let a = outer.to_parent(inner.to_parent(p));
        let b = outer.compose(&inner).to_parent(p);
        assert!(a.dist(b) < 1e-12);
    }

    #[test]
    fn box_overlap_cases() {
        let a = OrientedBox { center: Vec2::ZERO, heading: 0.0, length: 4.0, width: 2.0 };
        let far = OrientedBox { center: Vec2::new(10.0, 0.0), ..a };
        assert!(!a.overlaps(&far));
        assert!(a.overlaps(&a));
        // 45 degrees rotated box whose corner pokes into `a`
        let diag = OrientedBox { center: Vec2::new(3.3, 0.0), heading: PI / 4.0, length: 2.0, width: 2.0 };
        assert!(a.overlaps(&diag));
        let diag_far = OrientedBox { center: Vec2::new(3.5, 0.0), ..diag };
        assert!(!a.overlaps(&diag_far));
    }

    #[test]
    fn polygon_boundary_inclusive() {
        let sq = Polygon::rect(0.0, 0.0, 1.0, 1.0);
        assert!(sq.contains(Vec2::new(0.5, 0.5)));
        assert!(sq.contains(Vec2::new(1.0, 0.5)));
        assert!(sq.contains(Vec2::new(0.0, 0.0)));
        assert!(!sq.contains(Vec2::new(1.0 + 1e-6, 0.5)));
    }
}
