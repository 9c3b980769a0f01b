//! Quaternions and the canonical rotation table used by the rotation head.

use std::sync::OnceLock;

use super::{Mat3, Vec3};
use crate::error::{Error, Result};

/// Rotation quaternion, scalar-first (w, x, y, z).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Quaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quaternion {
    pub const IDENTITY: Quaternion = Quaternion {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Quaternion { w, x, y, z }
    }

    pub fn from_axis_angle(axis: Vec3, angle_rad: f64) -> Self {
        let a = axis.normalized();
        let (s, c) = (angle_rad * 0.5).sin_cos();
        Quaternion::new(c, s * a.x, s * a.y, s * a.z)
    }

    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn normalized(&self) -> Self {
        let n = self.norm();
        Quaternion::new(self.w / n, self.x / n, self.y / n, self.z / n)
    }

    pub fn dot(&self, o: &Quaternion) -> f64 {
        self.w * o.w + self.x * o.x + self.y * o.y + self.z * o.z
    }

    /// Rotation matrix of a unit quaternion; inputs further than 1e-3 from
    /// unit norm are rejected. q and -q map to the same matrix.
    pub fn to_rotmat(&self) -> Result<Mat3> {
        let n = self.norm();
        if (n - 1.0).abs() > 1e-3 {
            return Err(Error::invalid(format!(
                "quaternion norm {n} is not within 1e-3 of unit"
            )));
        }
        Ok(self.normalized().rotmat_of_unit())
    }

    /// Rotation matrix without the unit-norm guard; normalizes internally.
    pub fn rotmat_normalized(&self) -> Mat3 {
        self.normalized().rotmat_of_unit()
    }

    fn rotmat_of_unit(&self) -> Mat3 {
        let (w, x, y, z) = (self.w, self.x, self.y, self.z);
        [
            [
                1.0 - 2.0 * (y * y + z * z),
                2.0 * (x * y - w * z),
                2.0 * (x * z + w * y),
            ],
            [
                2.0 * (x * y + w * z),
                1.0 - 2.0 * (x * x + z * z),
                2.0 * (y * z - w * x),
            ],
            [
                2.0 * (x * z - w * y),
                2.0 * (y * z + w * x),
                1.0 - 2.0 * (x * x + y * y),
            ],
        ]
    }
}

/// The 32 canonical rotations the rotation head classifies over.
///
/// Entry 0 is the identity; the rest are 180-degree turns about the three
/// axes and six face diagonals, +/-45-degree turns about those same nine
/// axes, and +/-120-degree turns about two body diagonals. All entries are
/// unit quaternions, pairwise distinct up to sign.
pub fn canonical_rotations() -> &'static [Quaternion; 32] {
    static TABLE: OnceLock<[Quaternion; 32]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let axes = [
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(0.0, 1.0, 0.0),
            Vec3::new(0.0, 0.0, 1.0),
        ];
        let face_diagonals = [
            Vec3::new(1.0, 1.0, 0.0),
            Vec3::new(1.0, -1.0, 0.0),
            Vec3::new(0.0, 1.0, 1.0),
            Vec3::new(0.0, 1.0, -1.0),
            Vec3::new(1.0, 0.0, 1.0),
            Vec3::new(-1.0, 0.0, 1.0),
        ];
        let body_diagonals = [Vec3::new(1.0, 1.0, 1.0), Vec3::new(1.0, -1.0, 1.0)];

        let mut out = Vec::with_capacity(32);
        out.push(Quaternion::IDENTITY);
        let pi = std::f64::consts::PI;
        for ax in axes.iter().chain(face_diagonals.iter()) {
            out.push(Quaternion::from_axis_angle(*ax, pi));
        }
        for ax in axes.iter().chain(face_diagonals.iter()) {
            out.push(Quaternion::from_axis_angle(*ax, pi / 4.0));
            out.push(Quaternion::from_axis_angle(*ax, -pi / 4.0));
        }
        for ax in body_diagonals.iter() {
            out.push(Quaternion::from_axis_angle(*ax, 2.0 * pi / 3.0));
            out.push(Quaternion::from_axis_angle(*ax, -2.0 * pi / 3.0));
        }
        out.try_into().expect("canonical table holds 32 entries")
    })
}
