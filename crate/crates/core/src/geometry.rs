//! 2-D geometry: vectors, poses, and polyline arc-length utilities shared
//! by the simulator, the planner and the metrics.

use std::ops::{Add, Mul, Neg, Sub};

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { x: 0.0, y: 0.0 };

    pub fn new(x: f64, y: f64) -> Self {
        Vec2 { x, y }
    }

    pub fn dot(self, o: Vec2) -> f64 {
        self.x * o.x + self.y * o.y
    }

    /// 2-D cross product (z component); positive when `o` is counter-
    /// clockwise from `self`.
    pub fn cross(self, o: Vec2) -> f64 {
        self.x * o.y - self.y * o.x
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn dist(self, o: Vec2) -> f64 {
        (self - o).norm()
    }

    pub fn normalized(self) -> Vec2 {
        let n = self.norm();
        if n < 1e-12 {
            Vec2::ZERO
        } else {
            Vec2::new(self.x / n, self.y / n)
        }
    }

    pub fn perp(self) -> Vec2 {
        Vec2::new(-self.y, self.x)
    }

    pub fn angle(self) -> f64 {
        self.y.atan2(self.x)
    }

    pub fn from_angle(a: f64) -> Vec2 {
        Vec2::new(a.cos(), a.sin())
    }

    pub fn rotated(self, a: f64) -> Vec2 {
        let (s, c) = a.sin_cos();
        Vec2::new(self.x * c - self.y * s, self.x * s + self.y * c)
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

/// Position plus heading (radians, world frame, CCW from +x).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub pos: Vec2,
    pub heading: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, heading: f64) -> Self {
        Pose { pos: Vec2::new(x, y), heading }
    }

    pub fn forward(&self) -> Vec2 {
        Vec2::from_angle(self.heading)
    }

    /// Right-hand lateral direction.
    pub fn right(&self) -> Vec2 {
        Vec2::new(self.heading.sin(), -self.heading.cos())
    }

    /// World point expressed in this pose's ego frame: +y forward, +x right.
    pub fn to_ego(&self, world: Vec2) -> Vec2 {
        let d = world - self.pos;
        Vec2::new(d.dot(self.right()), d.dot(self.forward()))
    }

    /// Inverse of [`Pose::to_ego`].
    pub fn from_ego(&self, ego: Vec2) -> Vec2 {
        self.pos + self.right() * ego.x + self.forward() * ego.y
    }
}

/// Wrap an angle to (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let mut a = a.rem_euclid(std::f64::consts::TAU);
    if a > std::f64::consts::PI {
        a -= std::f64::consts::TAU;
    }
    a
}

/// Open polyline with cached cumulative arc length.
#[derive(Debug, Clone)]
pub struct Polyline {
    points: Vec<Vec2>,
    cum: Vec<f64>,
}

impl Polyline {
    pub fn new(points: Vec<Vec2>) -> Self {
        assert!(points.len() >= 2, "polyline needs at least two points");
        let mut cum = Vec::with_capacity(points.len());
        let mut s = 0.0;
        cum.push(0.0);
        for i in 1..points.len() {
            s += points[i].dist(points[i - 1]);
            cum.push(s);
        }
        Polyline { points, cum }
    }

    pub fn points(&self) -> &[Vec2] {
        &self.points
    }

    pub fn length(&self) -> f64 {
        *self.cum.last().unwrap()
    }

    /// Point at arc length `s` (clamped to the ends).
    pub fn point_at(&self, s: f64) -> Vec2 {
        let s = s.clamp(0.0, self.length());
        let i = match self.cum.binary_search_by(|c| c.partial_cmp(&s).unwrap()) {
            Ok(i) => i,
            Err(i) => i.saturating_sub(1),
        };
        if i + 1 >= self.points.len() {
            return self.points[self.points.len() - 1];
        }
        let seg = self.cum[i + 1] - self.cum[i];
        if seg < 1e-12 {
            return self.points[i];
        }
        let t = (s - self.cum[i]) / seg;
        self.points[i] + (self.points[i + 1] - self.points[i]) * t
    }

    /// Tangent direction at arc length `s`.
    pub fn tangent_at(&self, s: f64) -> Vec2 {
        let s = s.clamp(0.0, self.length());
        let i = match self.cum.binary_search_by(|c| c.partial_cmp(&s).unwrap()) {
            Ok(i) => i.min(self.points.len() - 2),
            Err(i) => (i.saturating_sub(1)).min(self.points.len() - 2),
        };
        (self.points[i + 1] - self.points[i]).normalized()
    }

    /// Closest point on the polyline: returns (arc length, distance).
    pub fn project(&self, p: Vec2) -> (f64, f64) {
        let mut best_s = 0.0;
        let mut best_d = f64::INFINITY;
        for i in 0..self.points.len() - 1 {
            let a = self.points[i];
            let b = self.points[i + 1];
            let ab = b - a;
            let len2 = ab.dot(ab);
            let t = if len2 < 1e-12 { 0.0 } else { ((p - a).dot(ab) / len2).clamp(0.0, 1.0) };
            let q = a + ab * t;
            let d = p.dist(q);
            if d < best_d {
                best_d = d;
                best_s = self.cum[i] + ab.norm() * t;
            }
        }
        (best_s, best_d)
    }

    /// Arc length of the driven polyline itself (alias of length, reads
    /// better at call sites dealing with trajectories).
    pub fn arc_length(&self) -> f64 {
        self.length()
    }
}

/// Oriented rectangle (vehicle footprint).
#[derive(Debug, Clone, Copy)]
pub struct Obb {
    pub center: Vec2,
    pub heading: f64,
    pub half_len: f64,
    pub half_wid: f64,
}

impl Obb {
    pub fn corners(&self) -> [Vec2; 4] {
        let f = Vec2::from_angle(self.heading);
        let r = f.perp() * -1.0;
        [
            self.center + f * self.half_len + r * self.half_wid,
            self.center + f * self.half_len - r * self.half_wid,
            self.center - f * self.half_len - r * self.half_wid,
            self.center - f * self.half_len + r * self.half_wid,
        ]
    }

    /// Separating-axis overlap test.
    pub fn intersects(&self, other: &Obb) -> bool {
        let ca = self.corners();
        let cb = other.corners();
        for rect in [&ca, &cb] {
            for i in 0..2 {
                let axis = (rect[(i + 1) % 4] - rect[i]).normalized();
                let (mut amin, mut amax) = (f64::INFINITY, f64::NEG_INFINITY);
                for p in &ca {
                    let v = p.dot(axis);
                    amin = amin.min(v);
                    amax = amax.max(v);
                }
                let (mut bmin, mut bmax) = (f64::INFINITY, f64::NEG_INFINITY);
                for p in &cb {
                    let v = p.dot(axis);
                    bmin = bmin.min(v);
                    bmax = bmax.max(v);
                }
                if amax < bmin || bmax < amin {
                    return false;
                }
            }
        }
        true
    }

    pub fn contains(&self, p: Vec2) -> bool {
        let d = p - self.center;
        let f = Vec2::from_angle(self.heading);
        let lon = d.dot(f);
        let lat = d.dot(f.perp());
        lon.abs() <= self.half_len && lat.abs() <= self.half_wid
    }
}
