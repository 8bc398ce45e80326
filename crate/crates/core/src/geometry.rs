//! Small 2D geometry kit shared by the simulator and the task-state distance functions.

use std::f64::consts::PI;
use std::ops::{Add, Mul, Sub};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
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

    pub fn dot(self, other: Vec2) -> f64 {
        self.x * other.x + self.y * other.y
    }

    pub fn norm_sq(self) -> f64 {
        self.dot(self)
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn distance(self, other: Vec2) -> f64 {
        (self - other).norm()
    }

    pub fn angle(self) -> f64 {
        self.y.atan2(self.x)
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    fn add(self, rhs: Vec2) -> Vec2 {
        Vec2::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, rhs: Vec2) -> Vec2 {
        Vec2::new(self.x - rhs.x, self.y - rhs.y)
    }
}

impl Mul<f64> for Vec2 {
    type Output = Vec2;
    fn mul(self, rhs: f64) -> Vec2 {
        Vec2::new(self.x * rhs, self.y * rhs)
    }
}

/// A wall segment from `a` to `b`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub a: Vec2,
    pub b: Vec2,
}

impl Segment {
    pub const fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self {
            a: Vec2::new(x1, y1),
            b: Vec2::new(x2, y2),
        }
    }

    /// Closest point of the segment to `p`.
    pub fn closest_point(&self, p: Vec2) -> Vec2 {
        let ab = self.b - self.a;
        let len_sq = ab.norm_sq();
        if len_sq == 0.0 {
            return self.a;
        }
        let t = ((p - self.a).dot(ab) / len_sq).clamp(0.0, 1.0);
        self.a + ab * t
    }

    pub fn distance_to_point(&self, p: Vec2) -> f64 {
        p.distance(self.closest_point(p))
    }

    pub fn length(&self) -> f64 {
        self.a.distance(self.b)
    }

    pub fn intersects(&self, other: &Segment) -> bool {
        fn orient(a: Vec2, b: Vec2, c: Vec2) -> f64 {
            (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x)
        }
        let d1 = orient(other.a, other.b, self.a);
        let d2 = orient(other.a, other.b, self.b);
        let d3 = orient(self.a, self.b, other.a);
        let d4 = orient(self.a, self.b, other.b);
        if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
            && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
        {
            return true;
        }
        // collinear / touching cases are caught by the endpoint distances
        false
    }

    pub fn distance_to_segment(&self, other: &Segment) -> f64 {
        if self.intersects(other) {
            return 0.0;
        }
        self.distance_to_point(other.a)
            .min(self.distance_to_point(other.b))
            .min(other.distance_to_point(self.a))
            .min(other.distance_to_point(self.b))
    }
}

/// Wraps an angle into `[-π, π)`.
pub fn wrap_angle(theta: f64) -> f64 {
    let wrapped = (theta + PI).rem_euclid(2.0 * PI) - PI;
    // rem_euclid can round up to exactly 2π
    if wrapped >= PI {
        wrapped - 2.0 * PI
    } else {
        wrapped
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wrap_angle_range() {
        for k in -20..20 {
            let theta = k as f64 * 0.7;
            let w = wrap_angle(theta);
            assert!((-PI..PI).contains(&w), "{theta} -> {w}");
            assert!((theta.cos() - w.cos()).abs() < 1e-9);
            assert!((theta.sin() - w.sin()).abs() < 1e-9);
        }
        assert_eq!(wrap_angle(PI), -PI);
    }

    #[test]
    fn point_segment_distance() {
        let s = Segment::new(0.0, 0.0, 2.0, 0.0);
        assert_eq!(s.distance_to_point(Vec2::new(1.0, 3.0)), 3.0);
        assert_eq!(s.distance_to_point(Vec2::new(5.0, 4.0)), 5.0);
        assert_eq!(s.distance_to_point(Vec2::new(-3.0, 0.0)), 3.0);
    }

    #[test]
    fn segment_segment_distance() {
        let s = Segment::new(0.0, 0.0, 2.0, 0.0);
        assert_eq!(
            s.distance_to_segment(&Segment::new(1.0, -1.0, 1.0, 1.0)),
            0.0
        );
        assert_eq!(
            s.distance_to_segment(&Segment::new(0.0, 2.0, 2.0, 2.0)),
            2.0
        );
        assert_eq!(
            s.distance_to_segment(&Segment::new(2.0, 0.0, 3.0, 0.0)),
            0.0
        );
    }
}
