//! Cameras, poses, and the small fixed-size linear algebra they need.
//!
//! Conventions used throughout the crate: right-handed world coordinates,
//! cameras stored as camera-to-world rigid transforms, looking along -z with
//! +y up in camera space. Object geometry lives inside the unit cube
//! [-1, 1]^3 and cameras orbit at a fixed radius looking at the origin.

mod quat;
mod rays;

pub use quat::{canonical_rotations, Quaternion};
pub use rays::{pluecker_rays, RayMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Stream;

pub const ORBIT_RADIUS: f64 = 1.5;
pub const DEFAULT_FOV_Y_DEG: f64 = 40.0;
pub const DEFAULT_NEAR: f64 = 0.05;
pub const DEFAULT_FAR: f64 = 10.0;

/// Elevation bounds (degrees) for orbit pose sampling.
pub const ORBIT_ELEV_DEG: (f64, f64) = (5.0, 30.0);

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3 {
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3 { x, y, z }
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn normalized(self) -> Vec3 {
        let n = self.norm();
        Vec3::new(self.x / n, self.y / n, self.z / n)
    }
}

impl std::ops::Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl std::ops::Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl std::ops::Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl std::ops::Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

/// Row-major 3x3 matrix.
pub type Mat3 = [[f64; 3]; 3];

pub const MAT3_IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

pub fn mat_vec(m: &Mat3, v: Vec3) -> Vec3 {
    Vec3::new(
        m[0][0] * v.x + m[0][1] * v.y + m[0][2] * v.z,
        m[1][0] * v.x + m[1][1] * v.y + m[1][2] * v.z,
        m[2][0] * v.x + m[2][1] * v.y + m[2][2] * v.z,
    )
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    out
}

pub fn mat_transpose(m: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = m[j][i];
        }
    }
    out
}

/// A posed pinhole camera: camera-to-world rotation and position plus the
/// vertical field of view and target image size.
#[derive(Clone, Debug)]
pub struct CameraView {
    /// Columns are the camera's x/y/z axes expressed in world coordinates.
    pub rotation: Mat3,
    /// Camera position in world coordinates.
    pub origin: Vec3,
    pub fov_y_deg: f64,
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
}

impl CameraView {
    /// Camera at `eye` looking at `target` with the given world-up hint.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3, fov_y_deg: f64, width: usize, height: usize) -> Self {
        let z = (eye - target).normalized();
        let x = up.cross(z).normalized();
        let y = z.cross(x);
        let rotation = [[x.x, y.x, z.x], [x.y, y.y, z.y], [x.z, y.z, z.z]];
        CameraView {
            rotation,
            origin: eye,
            fov_y_deg,
            width,
            height,
            near: DEFAULT_NEAR,
            far: DEFAULT_FAR,
        }
    }

    /// Camera on the orbit sphere at the given elevation/azimuth (degrees),
    /// looking at the origin.
    pub fn orbit(elev_deg: f64, azim_deg: f64, radius: f64, fov_y_deg: f64, size: usize) -> Self {
        let e = elev_deg.to_radians();
        let a = azim_deg.to_radians();
        let eye = Vec3::new(
            radius * e.cos() * a.sin(),
            radius * e.sin(),
            radius * e.cos() * a.cos(),
        );
        CameraView::look_at(eye, Vec3::ZERO, Vec3::new(0.0, 1.0, 0.0), fov_y_deg, size, size)
    }

    /// World-to-camera transform: p_cam = r * (p_world - origin).
    pub fn world_to_camera(&self) -> (Mat3, Vec3) {
        (mat_transpose(&self.rotation), self.origin)
    }

    /// Focal length in pixels (square pixels, set by the vertical fov).
    pub fn focal_px(&self) -> f64 {
        0.5 * self.height as f64 / (0.5 * self.fov_y_deg.to_radians()).tan()
    }

    /// Row-major 16-element camera-to-world matrix.
    pub fn to_matrix16(&self) -> [f64; 16] {
        let r = &self.rotation;
        [
            r[0][0], r[0][1], r[0][2], self.origin.x,
            r[1][0], r[1][1], r[1][2], self.origin.y,
            r[2][0], r[2][1], r[2][2], self.origin.z,
            0.0, 0.0, 0.0, 1.0,
        ]
    }

    pub fn from_matrix16(m: &[f64; 16], fov_y_deg: f64, width: usize, height: usize) -> Self {
        CameraView {
            rotation: [
                [m[0], m[1], m[2]],
                [m[4], m[5], m[6]],
                [m[8], m[9], m[10]],
            ],
            origin: Vec3::new(m[3], m[7], m[11]),
            fov_y_deg,
            width,
            height,
            near: DEFAULT_NEAR,
            far: DEFAULT_FAR,
        }
    }
}

/// Input poses plus novel supervision poses for one scene.
pub struct OrbitPoses {
    pub input: Vec<CameraView>,
    pub novel: Vec<CameraView>,
}

/// Samples orbit cameras: input views share one elevation drawn from the
/// orbit band and sit at azimuths 90 degrees apart from a random start;
/// novel views are drawn from the 15-degree azimuth x 5-degree elevation
/// orbit grid.
pub fn sample_orbit_cameras(
    seed: u64,
    n_input: usize,
    n_novel: usize,
    image_size: usize,
    fov_y_deg: f64,
) -> OrbitPoses {
    let s = Stream::new(seed, "orbit-cameras");
    let elev = s.uniform_in(0, ORBIT_ELEV_DEG.0, ORBIT_ELEV_DEG.1);
    let azim0 = s.uniform_in(1, 0.0, 360.0);
    let input = (0..n_input)
        .map(|i| {
            CameraView::orbit(
                elev,
                azim0 + 90.0 * i as f64,
                ORBIT_RADIUS,
                fov_y_deg,
                image_size,
            )
        })
        .collect();
    let novel = (0..n_novel)
        .map(|i| {
            let az_step = s.u64_at(2 + 2 * i as u64) % 24;
            let el_step = s.u64_at(3 + 2 * i as u64) % 6;
            CameraView::orbit(
                ORBIT_ELEV_DEG.0 + 5.0 * el_step as f64,
                15.0 * az_step as f64,
                ORBIT_RADIUS,
                fov_y_deg,
                image_size,
            )
        })
        .collect();
    OrbitPoses { input, novel }
}

/// Evenly spaced ring of cameras at one elevation, used for mesh extraction.
pub fn orbit_ring(n: usize, elev_deg: f64, image_size: usize, fov_y_deg: f64) -> Vec<CameraView> {
    (0..n)
        .map(|i| {
            CameraView::orbit(
                elev_deg,
                360.0 * i as f64 / n as f64,
                ORBIT_RADIUS,
                fov_y_deg,
                image_size,
            )
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct CameraRecord {
    camera_to_world: Vec<f64>,
    fov_y_deg: f64,
    width: usize,
    height: usize,
}

#[derive(Serialize, Deserialize)]
struct CameraFile {
    views: Vec<CameraRecord>,
}

pub fn write_cameras(path: &std::path::Path, views: &[CameraView]) -> Result<()> {
    let file = CameraFile {
        views: views
            .iter()
            .map(|v| CameraRecord {
                camera_to_world: v.to_matrix16().to_vec(),
                fov_y_deg: v.fov_y_deg,
                width: v.width,
                height: v.height,
            })
            .collect(),
    };
    std::fs::write(path, serde_json::to_string_pretty(&file)?)?;
    Ok(())
}

pub fn read_cameras(path: &std::path::Path) -> Result<Vec<CameraView>> {
    let text = std::fs::read_to_string(path)?;
    let file: CameraFile = serde_json::from_str(&text)?;
    file.views
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let m: [f64; 16] = r
                .camera_to_world
                .as_slice()
                .try_into()
                .map_err(|_| {
                    Error::format(format!(
                        "view {i}: camera_to_world must hold 16 elements, got {}",
                        r.camera_to_world.len()
                    ))
                })?;
            Ok(CameraView::from_matrix16(&m, r.fov_y_deg, r.width, r.height))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn look_at_from_positive_z_is_identity_rotation() {
        let c = CameraView::look_at(
            Vec3::new(0.0, 0.0, 1.5),
            Vec3::ZERO,
            Vec3::new(0.0, 1.0, 0.0),
            40.0,
            64,
            64,
        );
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert_relative_eq!(c.rotation[i][j], want, epsilon = 1e-12);
            }
        }
        assert_relative_eq!(c.origin.z, 1.5);
    }

    #[test]
    fn orbit_cameras_look_at_origin_from_fixed_radius() {
        for (e, a) in [(5.0, 0.0), (17.0, 133.0), (30.0, 350.0)] {
            let c = CameraView::orbit(e, a, ORBIT_RADIUS, 40.0, 32);
            assert_relative_eq!(c.origin.norm(), ORBIT_RADIUS, epsilon = 1e-12);
            // -z axis of the camera must point from eye to origin
            let fwd = Vec3::new(-c.rotation[0][2], -c.rotation[1][2], -c.rotation[2][2]);
            let to_origin = (Vec3::ZERO - c.origin).normalized();
            assert_relative_eq!(fwd.dot(to_origin), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn sampled_poses_respect_orbit_contract() {
        let p = sample_orbit_cameras(9, 4, 6, 64, DEFAULT_FOV_Y_DEG);
        assert_eq!(p.input.len(), 4);
        assert_eq!(p.novel.len(), 6);
        for c in p.input.iter().chain(p.novel.iter()) {
            assert_relative_eq!(c.origin.norm(), ORBIT_RADIUS, epsilon = 1e-12);
            let elev = (c.origin.y / ORBIT_RADIUS).asin().to_degrees();
            assert!((ORBIT_ELEV_DEG.0 - 1e-9..=ORBIT_ELEV_DEG.1 + 1e-9).contains(&elev));
        }
        // input azimuths are spaced 90 degrees apart
        let azim = |c: &CameraView| c.origin.x.atan2(c.origin.z).to_degrees().rem_euclid(360.0);
        for k in 1..4 {
            let d = (azim(&p.input[k]) - azim(&p.input[0])).rem_euclid(360.0);
            assert_relative_eq!(d, 90.0 * k as f64, epsilon = 1e-9);
        }
        // identical seed reproduces identical poses
        let q = sample_orbit_cameras(9, 4, 6, 64, DEFAULT_FOV_Y_DEG);
        assert_eq!(p.input[2].origin, q.input[2].origin);
    }

    #[test]
    fn camera_json_round_trips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cams.json");
        let views: Vec<CameraView> = (0..3)
            .map(|i| CameraView::orbit(11.0 + i as f64, 73.0 * i as f64, ORBIT_RADIUS, 40.0, 64))
            .collect();
        write_cameras(&path, &views).unwrap();
        let back = read_cameras(&path).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in views.iter().zip(back.iter()) {
            assert_eq!(a.to_matrix16(), b.to_matrix16());
            assert_eq!(a.fov_y_deg, b.fov_y_deg);
            assert_eq!((a.width, a.height), (b.width, b.height));
        }
    }

    #[test]
    fn wrong_matrix_length_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        std::fs::write(
            &path,
            r#"{"views":[{"camera_to_world":[1,0,0],"fov_y_deg":40.0,"width":64,"height":64}]}"#,
        )
        .unwrap();
        assert!(read_cameras(&path).is_err());
    }
}
