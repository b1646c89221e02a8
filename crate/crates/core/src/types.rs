//! Shared geometric primitives: 3D points, yaw-rotated boxes, angle helpers.

use std::f64::consts::{PI, TAU};
use std::ops::{Add, Mul, Sub};

/// A point in the sensor frame (meters). X forward, Y left, Z up.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    /// Euclidean distance to the origin.
    #[inline]
    pub fn norm(&self) -> f64 {
        (self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    /// Distance to the Z-axis.
    #[inline]
    pub fn norm_xy(&self) -> f64 {
        (self.x * self.x + self.y * self.y).sqrt()
    }

    #[inline]
    pub fn dot(&self, o: Point3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(&self, o: Point3) -> Point3 {
        Point3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    /// Rotation about the vertical axis by `yaw` radians (counter-clockwise).
    #[inline]
    pub fn rotate_z(&self, yaw: f64) -> Point3 {
        let (s, c) = yaw.sin_cos();
        Point3::new(c * self.x - s * self.y, s * self.x + c * self.y, self.z)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

impl Add for Point3 {
    type Output = Point3;
    fn add(self, o: Point3) -> Point3 {
        Point3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl Sub for Point3 {
    type Output = Point3;
    fn sub(self, o: Point3) -> Point3 {
        Point3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for Point3 {
    type Output = Point3;
    fn mul(self, s: f64) -> Point3 {
        Point3::new(self.x * s, self.y * s, self.z * s)
    }
}

/// Yaw-rotated 3D box: center, size (length, width, height), yaw about Z.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Box3 {
    pub center: Point3,
    /// (l, w, h): extent along the box X axis, Y axis, and vertical.
    pub size: [f64; 3],
    pub yaw: f64,
}

impl Box3 {
    pub fn new(center: Point3, size: [f64; 3], yaw: f64) -> Self {
        Self { center, size, yaw }
    }

    pub fn volume(&self) -> f64 {
        self.size[0] * self.size[1] * self.size[2]
    }

    /// The eight corners in a fixed enumeration: bottom face then top face,
    /// each ordered (+x,+y), (+x,-y), (-x,-y), (-x,+y) in the box frame.
    pub fn corners(&self) -> [Point3; 8] {
        let (l2, w2, h2) = (self.size[0] / 2.0, self.size[1] / 2.0, self.size[2] / 2.0);
        let signs = [(1.0, 1.0), (1.0, -1.0), (-1.0, -1.0), (-1.0, 1.0)];
        let mut out = [Point3::default(); 8];
        for (k, &(sx, sy)) in signs.iter().enumerate() {
            let local_bottom = Point3::new(sx * l2, sy * w2, -h2);
            let local_top = Point3::new(sx * l2, sy * w2, h2);
            out[k] = local_bottom.rotate_z(self.yaw) + self.center;
            out[k + 4] = local_top.rotate_z(self.yaw) + self.center;
        }
        out
    }

    /// Ground-plane footprint corners (x, y) in the same order as `corners`.
    pub fn footprint(&self) -> [(f64, f64); 4] {
        let c = self.corners();
        [
            (c[0].x, c[0].y),
            (c[1].x, c[1].y),
            (c[2].x, c[2].y),
            (c[3].x, c[3].y),
        ]
    }
}

/// Wraps an angle to (-pi, pi].
#[inline]
pub fn normalize_angle(a: f64) -> f64 {
    let mut x = a % TAU;
    if x <= -PI {
        x += TAU;
    } else if x > PI {
        x -= TAU;
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rotate_z_quarter_turn() {
        let p = Point3::new(1.0, 0.0, 2.0).rotate_z(PI / 2.0);
        assert!((p.x - 0.0).abs() < 1e-12);
        assert!((p.y - 1.0).abs() < 1e-12);
        assert!((p.z - 2.0).abs() < 1e-12);
    }

    #[test]
    fn corners_of_axis_aligned_box() {
        let b = Box3::new(Point3::new(1.0, 2.0, 3.0), [2.0, 4.0, 6.0], 0.0);
        let c = b.corners();
        assert_eq!(c[0], Point3::new(2.0, 4.0, 0.0));
        assert_eq!(c[2], Point3::new(0.0, 0.0, 0.0));
        assert_eq!(c[6], Point3::new(0.0, 0.0, 6.0));
    }

    #[test]
    fn normalize_angle_branch_points() {
        assert_eq!(normalize_angle(PI), PI);
        assert_eq!(normalize_angle(-PI), PI);
        assert!((normalize_angle(3.0 * PI) - PI).abs() < 1e-12);
        assert!((normalize_angle(-0.25) + 0.25).abs() < 1e-15);
    }

    #[test]
    fn yaw_flip_maps_corners_diagonally() {
        let b = Box3::new(Point3::new(0.0, 0.0, 0.0), [4.0, 2.0, 1.0], 0.3);
        let f = Box3::new(b.center, b.size, b.yaw + PI);
        let (cb, cf) = (b.corners(), f.corners());
        // Rotating the box by pi swaps opposite footprint corners.
        for (a, b) in [(0, 2), (1, 3), (4, 6), (5, 7)] {
            assert!((cb[a].x - cf[b].x).abs() < 1e-12);
            assert!((cb[a].y - cf[b].y).abs() < 1e-12);
            assert!((cb[a].z - cf[b].z).abs() < 1e-12);
        }
    }
}
