//! Per-pixel ray maps in Pluecker coordinates.

use super::{mat_vec, CameraView, Vec3};

/// H x W x 6 ray map: unit direction d then moment m = origin x d, both in
/// world coordinates, for every pixel center.
pub struct RayMap {
    pub height: usize,
    pub width: usize,
    data: Vec<f64>,
}

impl RayMap {
    /// Wraps raw [d, m] channel data; the length must be H*W*6.
    pub fn from_raw(height: usize, width: usize, data: Vec<f64>) -> crate::Result<Self> {
        if data.len() != height * width * 6 {
            return Err(crate::Error::shape(format!(
                "ray data length {} is not {height} x {width} x 6",
                data.len()
            )));
        }
        Ok(RayMap { height, width, data })
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// (direction, moment) of the ray through pixel (row, col).
    pub fn at(&self, row: usize, col: usize) -> (Vec3, Vec3) {
        let o = (row * self.width + col) * 6;
        let d = &self.data[o..o + 6];
        (
            Vec3::new(d[0], d[1], d[2]),
            Vec3::new(d[3], d[4], d[5]),
        )
    }
}

/// Builds the Pluecker ray map for a camera. Rays pass through pixel centers
/// ((col + 0.5, row + 0.5) in continuous image coordinates, y down); the
/// moment encodes the camera position, so d . m = 0 for every ray.
pub fn pluecker_rays(view: &CameraView) -> RayMap {
    let (h, w) = (view.height, view.width);
    let f = view.focal_px();
    let cx = 0.5 * w as f64;
    let cy = 0.5 * h as f64;
    let mut data = Vec::with_capacity(h * w * 6);
    for row in 0..h {
        for col in 0..w {
            let u = col as f64 + 0.5;
            let v = row as f64 + 0.5;
            // camera space: x right, y up, looking along -z
            let dir_cam = Vec3::new((u - cx) / f, (cy - v) / f, -1.0);
            let d = mat_vec(&view.rotation, dir_cam).normalized();
            let m = view.origin.cross(d);
            data.extend_from_slice(&[d.x, d.y, d.z, m.x, m.y, m.z]);
        }
    }
    RayMap {
        height: h,
        width: w,
        data,
    }
}
