//! Gaussian splat rasterization: perspective projection of anisotropic
//! Gaussians to screen-space ellipses, front-to-back alpha compositing, a
//! brute-force reference renderer, a tile-binned renderer with the same
//! contract, the analytic backward pass, and disk-normal rendering.
//!
//! Conventions shared by every path here:
//! - camera looks along -z; depth is the positive distance along that axis
//! - pixel centers sit at (col + 0.5, row + 0.5); v grows downward
//! - splats are composited in (depth, original index) order
//! - a splat's footprint ends at Mahalanobis radius 3 (rho > 9 contributes
//!   nothing), which makes the tiled and reference images bitwise equal
//! - per-splat weight is alpha * exp(-rho/2), clamped to 0.999
//! - the depth channel is the camera depth of the splat that first pushes
//!   accumulated alpha past 0.5 (far plane where that never happens), and
//!   it carries no gradients

mod diff;
mod ply;

pub use crate::decoder::GaussianSet;
pub use diff::render_images;
pub use ply::{read_ply, write_ply};

use crate::error::{Error, Result};
use crate::geometry::{mat_transpose, mat_vec, CameraView, Mat3, Vec3};
use crate::par;
use crate::tensor::{Real, Tensor};

/// Variance floor added to both screen-space covariance diagonals, px^2.
pub const COV_BLUR_PX2: f64 = 0.3;
/// Third axis scale used to thicken 2D disks into renderable ellipsoids.
pub const DISK_THICKNESS: f64 = 1e-3;
/// Per-splat compositing weights never exceed this.
pub const MAX_SPLAT_WEIGHT: f64 = 0.999;
/// Splats whose screen radius falls below this many pixels are culled.
pub const MIN_SPLAT_RADIUS_PX: f64 = 0.3;
/// Mahalanobis-squared cutoff beyond which a splat does not touch a pixel.
pub const RHO_CUTOFF: f64 = 9.0;
/// Default white background.
pub const WHITE: [f64; 3] = [1.0, 1.0, 1.0];

/// One splat after projection to the image plane.
#[derive(Clone, Copy, Debug)]
pub struct ProjectedSplat {
    /// Pixel coordinates of the projected center.
    pub mean: [f64; 2],
    /// Screen-space covariance, upper triangle [xx, xy, yy].
    pub cov: [f64; 3],
    /// Inverse covariance, same layout.
    pub inv: [f64; 3],
    /// Camera depth (positive, along the viewing axis).
    pub depth: f64,
    /// Conservative footprint radius in pixels (3 sigma).
    pub radius: f64,
    /// Row in the originating GaussianSet.
    pub index: usize,
}

/// Rendered image block, row-major [H*W, channels].
pub struct RenderOutput<T: Real> {
    pub width: usize,
    pub height: usize,
    pub rgb: Tensor<T>,
    pub alpha: Tensor<T>,
    pub depth: Tensor<T>,
}

/// Gradients of a rendered image w.r.t. every Gaussian attribute and the
/// background color.
pub struct RenderGrads<T: Real> {
    pub mu: Tensor<T>,
    pub scale: Tensor<T>,
    pub color: Tensor<T>,
    pub opacity: Tensor<T>,
    pub rot: Tensor<T>,
    pub background: Tensor<T>,
}

fn rotmat_from_unit_quat(q: &[f64; 4]) -> Mat3 {
    let [w, x, y, z] = *q;
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

/// Partial derivatives of the unit-quaternion rotation matrix w.r.t. each
/// quaternion component, in [w, x, y, z] order.
fn rotmat_partials(q: &[f64; 4]) -> [Mat3; 4] {
    let [w, x, y, z] = *q;
    [
        [
            [0.0, -2.0 * z, 2.0 * y],
            [2.0 * z, 0.0, -2.0 * x],
            [-2.0 * y, 2.0 * x, 0.0],
        ],
        [
            [0.0, 2.0 * y, 2.0 * z],
            [2.0 * y, -4.0 * x, -2.0 * w],
            [2.0 * z, 2.0 * w, -4.0 * x],
        ],
        [
            [-4.0 * y, 2.0 * x, 2.0 * w],
            [2.0 * x, 0.0, 2.0 * z],
            [-2.0 * w, 2.0 * z, -4.0 * y],
        ],
        [
            [-4.0 * z, -2.0 * w, 2.0 * x],
            [2.0 * w, -4.0 * z, 2.0 * y],
            [2.0 * x, 2.0 * y, 0.0],
        ],
    ]
}

fn splat_row(gs_tensor: &Tensor<impl Real>, i: usize, cols: usize) -> Vec<f64> {
    gs_tensor.data()[i * cols..(i + 1) * cols]
        .iter()
        .map(|v| v.to_f64())
        .collect()
}

fn world_scales<T: Real>(gs: &GaussianSet<T>, i: usize) -> [f64; 3] {
    if gs.disk {
        let s = splat_row(&gs.scale, i, 2);
        [s[0], s[1], DISK_THICKNESS]
    } else {
        let s = splat_row(&gs.scale, i, 3);
        [s[0], s[1], s[2]]
    }
}

/// Projects one world point to (pixel x, pixel y, camera depth).
pub fn project_point(view: &CameraView, p: Vec3) -> ([f64; 2], f64) {
    let (w, origin) = view.world_to_camera();
    let pc = mat_vec(&w, p - origin);
    let zeta = -pc.z;
    let f = view.focal_px();
    let cx = view.width as f64 / 2.0;
    let cy = view.height as f64 / 2.0;
    ([cx + f * pc.x / zeta, cy - f * pc.y / zeta], zeta)
}

/// Projects Gaussian `i` of the set into the view; `None` when culled by
/// depth bounds or a sub-threshold footprint.
pub fn project<T: Real>(gs: &GaussianSet<T>, i: usize, view: &CameraView) -> Option<ProjectedSplat> {
    let mu = splat_row(&gs.mu, i, 3);
    let (w, origin) = view.world_to_camera();
    let pc = mat_vec(&w, Vec3::new(mu[0], mu[1], mu[2]) - origin);
    let zeta = -pc.z;
    if !(zeta > view.near && zeta < view.far) {
        return None;
    }
    let f = view.focal_px();
    let cx = view.width as f64 / 2.0;
    let cy = view.height as f64 / 2.0;
    let u = cx + f * pc.x / zeta;
    let v = cy - f * pc.y / zeta;

    let q: [f64; 4] = splat_row(&gs.rot, i, 4).try_into().unwrap();
    let r = rotmat_from_unit_quat(&q);
    let s = world_scales(gs, i);
    let mut sigma_w = [[0.0; 3]; 3];
    for a in 0..3 {
        for b in 0..3 {
            for k in 0..3 {
                sigma_w[a][b] += r[a][k] * s[k] * s[k] * r[b][k];
            }
        }
    }
    let j = [
        [f / zeta, 0.0, f * pc.x / (zeta * zeta)],
        [0.0, -f / zeta, -f * pc.y / (zeta * zeta)],
    ];
    // a = j * w
    let mut a = [[0.0; 3]; 2];
    for row in 0..2 {
        for col in 0..3 {
            for k in 0..3 {
                a[row][col] += j[row][k] * w[k][col];
            }
        }
    }
    // cov2 = a * sigma_w * a^T + blur
    let mut asig = [[0.0; 3]; 2];
    for row in 0..2 {
        for col in 0..3 {
            for k in 0..3 {
                asig[row][col] += a[row][k] * sigma_w[k][col];
            }
        }
    }
    let mut cov = [COV_BLUR_PX2, 0.0, COV_BLUR_PX2];
    for k in 0..3 {
        cov[0] += asig[0][k] * a[0][k];
        cov[1] += asig[0][k] * a[1][k];
        cov[2] += asig[1][k] * a[1][k];
    }
    let det = cov[0] * cov[2] - cov[1] * cov[1];
    if det <= 0.0 {
        return None;
    }
    let mid = 0.5 * (cov[0] + cov[2]);
    let lam_max = mid + (mid * mid - det).max(0.0).sqrt();
    let radius = 3.0 * lam_max.sqrt();
    if radius < MIN_SPLAT_RADIUS_PX {
        return None;
    }
    Some(ProjectedSplat {
        mean: [u, v],
        cov,
        inv: [cov[2] / det, -cov[1] / det, cov[0] / det],
        depth: zeta,
        radius,
        index: i,
    })
}

/// All visible splats, sorted front to back with original index tiebreak.
fn sorted_projections<T: Real>(gs: &GaussianSet<T>, view: &CameraView) -> Vec<ProjectedSplat> {
    let mut projected: Vec<ProjectedSplat> = (0..gs.count())
        .filter_map(|i| project(gs, i, view))
        .collect();
    projected.sort_by(|a, b| {
        a.depth
            .partial_cmp(&b.depth)
            .unwrap()
            .then(a.index.cmp(&b.index))
    });
    projected
}

fn splat_weight(sp: &ProjectedSplat, alpha: f64, px: f64, py: f64) -> Option<f64> {
    let dx = px - sp.mean[0];
    let dy = py - sp.mean[1];
    let rho = sp.inv[0] * dx * dx + 2.0 * sp.inv[1] * dx * dy + sp.inv[2] * dy * dy;
    if rho > RHO_CUTOFF {
        return None;
    }
    Some((alpha * (-0.5 * rho).exp()).min(MAX_SPLAT_WEIGHT))
}

fn composite_pixel<T: Real>(
    splats: &[ProjectedSplat],
    opacities: &[f64],
    colors: &[f64],
    background: [f64; 3],
    far: f64,
    px: f64,
    py: f64,
    out: &mut [T],
) {
    let mut rgb = [0.0; 3];
    let mut transmit = 1.0;
    let mut acc_alpha = 0.0;
    let mut depth = far;
    let mut depth_set = false;
    for sp in splats {
        let Some(w) = splat_weight(sp, opacities[sp.index], px, py) else {
            continue;
        };
        let contrib = w * transmit;
        for c in 0..3 {
            rgb[c] += colors[sp.index * 3 + c] * contrib;
        }
        acc_alpha += contrib;
        if !depth_set && acc_alpha >= 0.5 {
            depth = sp.depth;
            depth_set = true;
        }
        transmit *= 1.0 - w;
    }
    for c in 0..3 {
        out[c] = T::from_f64(rgb[c] + background[c] * transmit);
    }
    out[3] = T::from_f64(1.0 - transmit);
    out[4] = T::from_f64(depth);
}

fn assemble_output<T: Real>(
    width: usize,
    height: usize,
    pixels: Vec<[T; 5]>,
) -> RenderOutput<T> {
    let n = width * height;
    let mut rgb = Vec::with_capacity(n * 3);
    let mut alpha = Vec::with_capacity(n);
    let mut depth = Vec::with_capacity(n);
    for p in &pixels {
        rgb.extend([p[0], p[1], p[2]]);
        alpha.push(p[3]);
        depth.push(p[4]);
    }
    RenderOutput {
        width,
        height,
        rgb: Tensor::from_vec(vec![n, 3], rgb),
        alpha: Tensor::from_vec(vec![n, 1], alpha),
        depth: Tensor::from_vec(vec![n, 1], depth),
    }
}

fn attribute_arrays<T: Real>(gs: &GaussianSet<T>) -> (Vec<f64>, Vec<f64>) {
    let opacities: Vec<f64> = gs.opacity.data().iter().map(|v| v.to_f64()).collect();
    let colors: Vec<f64> = gs.color.data().iter().map(|v| v.to_f64()).collect();
    (opacities, colors)
}

/// Exhaustive per-pixel renderer; the oracle every other path must match.
pub fn render_reference<T: Real>(
    gs: &GaussianSet<T>,
    view: &CameraView,
    background: [f64; 3],
) -> Result<RenderOutput<T>> {
    gs.validate()?;
    let splats = sorted_projections(gs, view);
    let (opacities, colors) = attribute_arrays(gs);
    let (width, height, far) = (view.width, view.height, view.far);
    let pixels = par::map_indexed(width * height, |p| {
        let (row, col) = (p / width, p % width);
        let mut out = [T::ZERO; 5];
        composite_pixel(
            &splats,
            &opacities,
            &colors,
            background,
            far,
            col as f64 + 0.5,
            row as f64 + 0.5,
            &mut out,
        );
        out
    });
    Ok(assemble_output(width, height, pixels))
}

fn tile_bins(
    splats: &[ProjectedSplat],
    width: usize,
    height: usize,
    tile: usize,
) -> (usize, usize, Vec<Vec<usize>>) {
    let tiles_x = width.div_ceil(tile);
    let tiles_y = height.div_ceil(tile);
    let mut bins = vec![Vec::new(); tiles_x * tiles_y];
    for (slot, sp) in splats.iter().enumerate() {
        let x0 = ((sp.mean[0] - sp.radius) / tile as f64).floor().max(0.0) as usize;
        let y0 = ((sp.mean[1] - sp.radius) / tile as f64).floor().max(0.0) as usize;
        let x1 = (((sp.mean[0] + sp.radius) / tile as f64).floor() as isize)
            .clamp(0, tiles_x as isize - 1) as usize;
        let y1 = (((sp.mean[1] + sp.radius) / tile as f64).floor() as isize)
            .clamp(0, tiles_y as isize - 1) as usize;
        if sp.mean[0] + sp.radius < 0.0 || sp.mean[1] + sp.radius < 0.0 {
            continue;
        }
        for ty in y0..=y1 {
            for tx in x0..=x1 {
                bins[ty * tiles_x + tx].push(slot);
            }
        }
    }
    (tiles_x, tiles_y, bins)
}

/// Tile-binned renderer; identical outputs to `render_reference`.
pub fn render_tiled<T: Real>(
    gs: &GaussianSet<T>,
    view: &CameraView,
    background: [f64; 3],
    tile: usize,
) -> Result<RenderOutput<T>> {
    if tile == 0 {
        return Err(Error::invalid("tile size must be positive"));
    }
    gs.validate()?;
    let splats = sorted_projections(gs, view);
    let (opacities, colors) = attribute_arrays(gs);
    let (width, height, far) = (view.width, view.height, view.far);
    let (tiles_x, tiles_y, bins) = tile_bins(&splats, width, height, tile);
    let tiles = par::map_indexed(tiles_x * tiles_y, |t| {
        let (ty, tx) = (t / tiles_x, t % tiles_x);
        let local: Vec<ProjectedSplat> = bins[t].iter().map(|&s| splats[s]).collect();
        let x_end = (tx * tile + tile).min(width);
        let y_end = (ty * tile + tile).min(height);
        let mut block = Vec::with_capacity((y_end - ty * tile) * (x_end - tx * tile));
        for row in ty * tile..y_end {
            for col in tx * tile..x_end {
                let mut out = [T::ZERO; 5];
                composite_pixel(
                    &local,
                    &opacities,
                    &colors,
                    background,
                    far,
                    col as f64 + 0.5,
                    row as f64 + 0.5,
                    &mut out,
                );
                block.push(out);
            }
        }
        block
    });
    let mut pixels = vec![[T::ZERO; 5]; width * height];
    for (t, block) in tiles.into_iter().enumerate() {
        let (ty, tx) = (t / tiles_x, t % tiles_x);
        let x_end = (tx * tile + tile).min(width);
        let mut it = block.into_iter();
        for row in ty * tile..(ty * tile + tile).min(height) {
            for col in tx * tile..x_end {
                pixels[row * width + col] = it.next().unwrap();
            }
        }
    }
    Ok(assemble_output(width, height, pixels))
}

/// Per-splat screen-space gradient accumulators.
#[derive(Clone, Copy, Default)]
struct ScreenGrad {
    du: f64,
    dv: f64,
    dcov: [f64; 3],
    dalpha: f64,
    dcolor: [f64; 3],
}

/// Analytic gradients of (rgb, alpha) w.r.t. all Gaussian attributes and
/// the background. Depth receives none by design. Accumulation folds a
/// fixed set of row bands in order, so results are worker-count
/// independent.
pub fn render_backward<T: Real>(
    gs: &GaussianSet<T>,
    view: &CameraView,
    background: [f64; 3],
    d_rgb: &Tensor<T>,
    d_alpha: &Tensor<T>,
) -> Result<RenderGrads<T>> {
    let (width, height) = (view.width, view.height);
    let n = width * height;
    if d_rgb.shape() != [n, 3] || d_alpha.shape() != [n, 1] {
        return Err(Error::shape(format!(
            "upstream grads {:?}/{:?}, want [{n},3] and [{n},1]",
            d_rgb.shape(),
            d_alpha.shape()
        )));
    }
    gs.validate()?;
    let splats = sorted_projections(gs, view);
    let (opacities, colors) = attribute_arrays(gs);
    let k = gs.count();

    let band_rows = 4;
    let n_bands = height.div_ceil(band_rows).max(1);
    let bands = par::map_indexed(n_bands, |band| {
        let mut grads = vec![ScreenGrad::default(); k];
        let mut dbg = [0.0; 3];
        for row in band * band_rows..((band + 1) * band_rows).min(height) {
            for col in 0..width {
                let p = row * width + col;
                let px = col as f64 + 0.5;
                let py = row as f64 + 0.5;
                let g_rgb = [
                    d_rgb.data()[p * 3].to_f64(),
                    d_rgb.data()[p * 3 + 1].to_f64(),
                    d_rgb.data()[p * 3 + 2].to_f64(),
                ];
                let g_alpha = d_alpha.data()[p].to_f64();

                let mut t_final = 1.0;
                for sp in &splats {
                    if let Some(w) = splat_weight(sp, opacities[sp.index], px, py) {
                        t_final *= 1.0 - w;
                    }
                }
                for c in 0..3 {
                    dbg[c] += g_rgb[c] * t_final;
                }

                // reverse walk: rebuild transmittance and suffix light
                let mut t_after = t_final;
                let mut suffix = [
                    background[0] * t_final,
                    background[1] * t_final,
                    background[2] * t_final,
                ];
                for sp in splats.iter().rev() {
                    let Some(w) = splat_weight(sp, opacities[sp.index], px, py) else {
                        continue;
                    };
                    let t_here = t_after / (1.0 - w);
                    let contrib = w * t_here;
                    let color = &colors[sp.index * 3..sp.index * 3 + 3];
                    let slot = &mut grads[sp.index];

                    let mut dw = g_alpha * t_final / (1.0 - w);
                    for c in 0..3 {
                        slot.dcolor[c] += g_rgb[c] * contrib;
                        dw += g_rgb[c] * (color[c] * t_here - suffix[c] / (1.0 - w));
                    }

                    let alpha = opacities[sp.index];
                    let gauss = w / alpha;
                    if alpha * gauss < MAX_SPLAT_WEIGHT {
                        slot.dalpha += dw * gauss;
                        let drho = -0.5 * dw * w;
                        let dx = px - sp.mean[0];
                        let dy = py - sp.mean[1];
                        let m0 = sp.inv[0] * dx + sp.inv[1] * dy;
                        let m1 = sp.inv[1] * dx + sp.inv[2] * dy;
                        slot.du += -2.0 * m0 * drho;
                        slot.dv += -2.0 * m1 * drho;
                        slot.dcov[0] -= drho * m0 * m0;
                        slot.dcov[1] -= drho * m0 * m1;
                        slot.dcov[2] -= drho * m1 * m1;
                    }

                    for c in 0..3 {
                        suffix[c] += color[c] * contrib;
                    }
                    t_after = t_here;
                }
            }
        }
        (grads, dbg)
    });

    let mut screen = vec![ScreenGrad::default(); k];
    let mut dbg_total = [0.0; 3];
    for (grads, dbg) in bands {
        for (acc, g) in screen.iter_mut().zip(&grads) {
            acc.du += g.du;
            acc.dv += g.dv;
            for i in 0..3 {
                acc.dcov[i] += g.dcov[i];
                acc.dcolor[i] += g.dcolor[i];
            }
            acc.dalpha += g.dalpha;
        }
        for c in 0..3 {
            dbg_total[c] += dbg[c];
        }
    }

    let s_cols = if gs.disk { 2 } else { 3 };
    let mut dmu = vec![T::ZERO; k * 3];
    let mut dscale = vec![T::ZERO; k * s_cols];
    let mut dcolor = vec![T::ZERO; k * 3];
    let mut dopacity = vec![T::ZERO; k];
    let mut drot = vec![T::ZERO; k * 4];

    let (w_mat, _) = view.world_to_camera();
    let f = view.focal_px();
    let per_splat = par::map_indexed(k, |i| {
        let g = &screen[i];
        geometric_backward(gs, i, view, &w_mat, f, g)
    });
    for (i, got) in per_splat.into_iter().enumerate() {
        let Some((gmu, gscale, gq)) = got else {
            dopacity[i] = T::from_f64(screen[i].dalpha);
            for c in 0..3 {
                dcolor[i * 3 + c] = T::from_f64(screen[i].dcolor[c]);
            }
            continue;
        };
        for c in 0..3 {
            dmu[i * 3 + c] = T::from_f64(gmu[c]);
            dcolor[i * 3 + c] = T::from_f64(screen[i].dcolor[c]);
        }
        for c in 0..s_cols {
            dscale[i * s_cols + c] = T::from_f64(gscale[c]);
        }
        for c in 0..4 {
            drot[i * 4 + c] = T::from_f64(gq[c]);
        }
        dopacity[i] = T::from_f64(screen[i].dalpha);
    }

    Ok(RenderGrads {
        mu: Tensor::from_vec(vec![k, 3], dmu),
        scale: Tensor::from_vec(vec![k, s_cols], dscale),
        color: Tensor::from_vec(vec![k, 3], dcolor),
        opacity: Tensor::from_vec(vec![k, 1], dopacity),
        rot: Tensor::from_vec(vec![k, 4], drot),
        background: Tensor::from_vec(
            vec![3],
            dbg_total.iter().map(|&v| T::from_f64(v)).collect(),
        ),
    })
}

/// Chains screen-space gradients (du, dv, dcov) back to world-space mu,
/// scale, and quaternion for one splat. `None` when the splat was culled.
fn geometric_backward<T: Real>(
    gs: &GaussianSet<T>,
    i: usize,
    view: &CameraView,
    w_mat: &Mat3,
    f: f64,
    g: &ScreenGrad,
) -> Option<([f64; 3], [f64; 3], [f64; 4])> {
    let mu = splat_row(&gs.mu, i, 3);
    let (_, origin) = view.world_to_camera();
    let pc = mat_vec(w_mat, Vec3::new(mu[0], mu[1], mu[2]) - origin);
    let zeta = -pc.z;
    if !(zeta > view.near && zeta < view.far) {
        return None;
    }
    let q: [f64; 4] = splat_row(&gs.rot, i, 4).try_into().unwrap();
    let r = rotmat_from_unit_quat(&q);
    let s = world_scales(gs, i);

    let mut sigma_w = [[0.0; 3]; 3];
    for a in 0..3 {
        for b in 0..3 {
            for kk in 0..3 {
                sigma_w[a][b] += r[a][kk] * s[kk] * s[kk] * r[b][kk];
            }
        }
    }
    let j = [
        [f / zeta, 0.0, f * pc.x / (zeta * zeta)],
        [0.0, -f / zeta, -f * pc.y / (zeta * zeta)],
    ];
    let mut a = [[0.0; 3]; 2];
    for row in 0..2 {
        for col in 0..3 {
            for kk in 0..3 {
                a[row][col] += j[row][kk] * w_mat[kk][col];
            }
        }
    }

    // dcov is the full symmetric gradient of the 2x2 screen covariance
    let gcov = [[g.dcov[0], g.dcov[1]], [g.dcov[1], g.dcov[2]]];

    // d sigma_w = a^T gcov a
    let mut dsw = [[0.0; 3]; 3];
    for p in 0..3 {
        for qx in 0..3 {
            let mut acc = 0.0;
            for x in 0..2 {
                for y in 0..2 {
                    acc += a[x][p] * gcov[x][y] * a[y][qx];
                }
            }
            dsw[p][qx] = acc;
        }
    }

    // da = 2 gcov a sigma_w
    let mut da = [[0.0; 3]; 2];
    for x in 0..2 {
        for p in 0..3 {
            let mut acc = 0.0;
            for y in 0..2 {
                for kk in 0..3 {
                    acc += 2.0 * gcov[x][y] * a[y][kk] * sigma_w[kk][p];
                }
            }
            da[x][p] = acc;
        }
    }

    // dj = da w^T
    let wt = mat_transpose(w_mat);
    let mut dj = [[0.0; 3]; 2];
    for x in 0..2 {
        for p in 0..3 {
            for kk in 0..3 {
                dj[x][p] += da[x][kk] * wt[kk][p];
            }
        }
    }

    // camera-space position gradient via j's entries and the pixel center
    let z2 = zeta * zeta;
    let z3 = z2 * zeta;
    let mut dpc = [0.0; 3];
    dpc[0] = dj[0][2] * f / z2 + g.du * f / zeta;
    dpc[1] = dj[1][2] * (-f / z2) + g.dv * (-f / zeta);
    let mut dzeta = dj[0][0] * (-f / z2)
        + dj[0][2] * (-2.0 * f * pc.x / z3)
        + dj[1][1] * (f / z2)
        + dj[1][2] * (2.0 * f * pc.y / z3);
    dzeta += g.du * (-f * pc.x / z2) + g.dv * (f * pc.y / z2);
    dpc[2] = -dzeta;

    // world-space mu gradient
    let mut gmu = [0.0; 3];
    for p in 0..3 {
        for kk in 0..3 {
            gmu[p] += w_mat[kk][p] * dpc[kk];
        }
    }

    // dR = 2 dsw r diag(s^2); ds_k = 2 s_k (r^T dsw r)_kk
    let mut dr = [[0.0; 3]; 3];
    for x in 0..3 {
        for y in 0..3 {
            let mut acc = 0.0;
            for kk in 0..3 {
                acc += 2.0 * dsw[x][kk] * r[kk][y] * s[y] * s[y];
            }
            dr[x][y] = acc;
        }
    }
    let mut gscale = [0.0; 3];
    for kk in 0..3 {
        let mut acc = 0.0;
        for x in 0..3 {
            for y in 0..3 {
                acc += r[x][kk] * dsw[x][y] * r[y][kk];
            }
        }
        gscale[kk] = 2.0 * s[kk] * acc;
    }

    // quaternion gradient through the rotation polynomial and the unit
    // sphere tangent projection
    let partials = rotmat_partials(&q);
    let mut gq_raw = [0.0; 4];
    for (c, part) in partials.iter().enumerate() {
        let mut acc = 0.0;
        for x in 0..3 {
            for y in 0..3 {
                acc += dr[x][y] * part[x][y];
            }
        }
        gq_raw[c] = acc;
    }
    let dot: f64 = (0..4).map(|c| gq_raw[c] * q[c]).sum();
    let mut gq = [0.0; 4];
    for c in 0..4 {
        gq[c] = gq_raw[c] - dot * q[c];
    }

    Some((gmu, gscale, gq))
}

/// Alpha-composited, camera-facing disk normals, [H*W, 3] in the camera
/// frame; unit length wherever any splat contributes.
pub fn render_normals<T: Real>(gs: &GaussianSet<T>, view: &CameraView) -> Result<Tensor<T>> {
    if !gs.disk {
        return Err(Error::invalid(
            "normal rendering needs disk-mode Gaussians",
        ));
    }
    gs.validate()?;
    let splats = sorted_projections(gs, view);
    let (opacities, _) = attribute_arrays(gs);
    let (w_mat, _) = view.world_to_camera();
    let normals_cam: Vec<[f64; 3]> = (0..gs.count())
        .map(|i| {
            let q: [f64; 4] = splat_row(&gs.rot, i, 4).try_into().unwrap();
            let r = rotmat_from_unit_quat(&q);
            let n_world = Vec3::new(r[0][2], r[1][2], r[2][2]);
            let n_cam = mat_vec(&w_mat, n_world);
            let flip = if n_cam.z < 0.0 { -1.0 } else { 1.0 };
            [n_cam.x * flip, n_cam.y * flip, n_cam.z * flip]
        })
        .collect();
    let (width, height) = (view.width, view.height);
    let pixels = par::map_indexed(width * height, |p| {
        let (row, col) = (p / width, p % width);
        let px = col as f64 + 0.5;
        let py = row as f64 + 0.5;
        let mut acc = [0.0; 3];
        let mut transmit = 1.0;
        for sp in &splats {
            let Some(w) = splat_weight(sp, opacities[sp.index], px, py) else {
                continue;
            };
            let contrib = w * transmit;
            for c in 0..3 {
                acc[c] += normals_cam[sp.index][c] * contrib;
            }
            transmit *= 1.0 - w;
        }
        let norm = (acc[0] * acc[0] + acc[1] * acc[1] + acc[2] * acc[2]).sqrt();
        if norm > 1e-12 {
            for c in &mut acc {
                *c /= norm;
            }
        }
        acc.map(T::from_f64)
    });
    let mut data = Vec::with_capacity(width * height * 3);
    for p in pixels {
        data.extend(p);
    }
    Ok(Tensor::from_vec(vec![width * height, 3], data))
}
