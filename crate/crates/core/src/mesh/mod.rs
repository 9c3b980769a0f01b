//! Depth-map fusion into a truncated signed-distance volume over the unit
//! cube and marching-cubes extraction to an indexed triangle mesh.
//!
//! Each rendered depth map carves a band of observations around the visible
//! surface: voxels in front of it store positive truncated distance, voxels
//! just behind store negative, and anything deeper or never hit by a ray
//! stays unobserved. Fusion is a per-voxel running mean, so the result is
//! independent of view order up to floating-point accumulation. Cells only
//! emit triangles when all eight corners were observed, which keeps
//! hallucinated walls out of occluded space.

pub mod tables;

use std::collections::HashMap;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{orbit_ring, CameraView, Vec3, DEFAULT_FOV_Y_DEG};
use crate::par;
use crate::splat::{project_point, render_tiled, GaussianSet, WHITE};
use crate::tensor::{Real, Tensor};
use tables::{CORNER_OFFSETS, EDGE_ENDPOINTS, TRI_TABLE};

/// Ring of poses used when meshing a reconstruction.
pub const MESH_VIEWS: usize = 16;
pub const MESH_ELEV_DEG: f64 = 15.0;
/// Truncation band half-width, in voxel widths.
const TRUNC_VOXELS: f64 = 4.0;
const MESH_TILE: usize = 16;

#[derive(Clone, Debug)]
pub struct Mesh {
    pub vertices: Vec<[f64; 3]>,
    /// Vertex index triples, zero-based.
    pub triangles: Vec<[usize; 3]>,
}

/// Regular grid of signed-distance samples over [-1, 1]^3 with
/// per-voxel observation weights.
pub struct TsdfVolume {
    res: usize,
    voxel: f64,
    trunc: f64,
    /// (running mean distance, observation count) per grid point.
    cells: Vec<(f64, f64)>,
}

impl TsdfVolume {
    pub fn new(resolution: usize) -> Result<Self> {
        if resolution < 2 {
            return Err(Error::invalid(format!(
                "volume resolution {resolution} leaves no cells"
            )));
        }
        let voxel = 2.0 / (resolution - 1) as f64;
        Ok(TsdfVolume {
            res: resolution,
            voxel,
            trunc: TRUNC_VOXELS * voxel,
            cells: vec![(0.0, 0.0); resolution * resolution * resolution],
        })
    }

    pub fn resolution(&self) -> usize {
        self.res
    }

    /// Grid spacing along each axis.
    pub fn voxel_size(&self) -> f64 {
        self.voxel
    }

    fn point(&self, i: usize) -> f64 {
        -1.0 + i as f64 * self.voxel
    }

    /// Folds one rendered depth map in. A voxel is updated only when it
    /// projects inside the image onto a pixel whose ray latched a surface,
    /// and lies no deeper than the truncation band behind it.
    pub fn integrate<T: Real>(&mut self, depth: &Tensor<T>, view: &CameraView) -> Result<()> {
        let (h, w) = (view.height, view.width);
        if depth.shape() != [h * w, 1] {
            return Err(Error::shape(format!(
                "depth map {:?} does not match a {w} x {h} view",
                depth.shape()
            )));
        }
        let res = self.res;
        let voxel = self.voxel;
        let trunc = self.trunc;
        let data = depth.data();
        par::for_each_chunk_mut(&mut self.cells, res * res, |z, slab| {
            let pz = -1.0 + z as f64 * voxel;
            for y in 0..res {
                let py = -1.0 + y as f64 * voxel;
                for x in 0..res {
                    let p = Vec3::new(-1.0 + x as f64 * voxel, py, pz);
                    let ([px, pyx], zeta) = project_point(view, p);
                    if !(zeta > view.near && zeta < view.far) {
                        continue;
                    }
                    let (col, row) = (px.floor(), pyx.floor());
                    if col < 0.0 || row < 0.0 || col >= w as f64 || row >= h as f64 {
                        continue;
                    }
                    let seen = data[row as usize * w + col as usize].to_f64();
                    if seen >= view.far {
                        continue;
                    }
                    let sdf = seen - zeta;
                    if sdf < -trunc {
                        continue;
                    }
                    let cell = &mut slab[y * res + x];
                    let (d, n) = *cell;
                    *cell = ((d * n + sdf.min(trunc)) / (n + 1.0), n + 1.0);
                }
            }
        });
        Ok(())
    }

    fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.res + y) * self.res + x
    }

    /// Extracts the zero level set. Cells with any unobserved corner are
    /// skipped; shared edge vertices are emitted once, in cell-scan order.
    pub fn marching_cubes(&self) -> Mesh {
        let res = self.res;
        let mut vertices: Vec<[f64; 3]> = Vec::new();
        let mut triangles: Vec<[usize; 3]> = Vec::new();
        let mut edge_vertex: HashMap<(usize, usize), usize> = HashMap::new();

        for z in 0..res - 1 {
            for y in 0..res - 1 {
                for x in 0..res - 1 {
                    let corner = |k: usize| -> (usize, f64, f64) {
                        let [ox, oy, oz] = CORNER_OFFSETS[k];
                        let idx = self.index(x + ox, y + oy, z + oz);
                        let (d, n) = self.cells[idx];
                        (idx, d, n)
                    };
                    let mut case = 0usize;
                    let mut observed = true;
                    for k in 0..8 {
                        let (_, d, n) = corner(k);
                        observed &= n > 0.0;
                        if d < 0.0 {
                            case |= 1 << k;
                        }
                    }
                    if !observed {
                        continue;
                    }
                    let fan = TRI_TABLE[case];
                    let mut ids = [0usize; 3];
                    for tri in fan.chunks_exact(3) {
                        for (slot, &edge) in tri.iter().enumerate() {
                            let (a, b) = EDGE_ENDPOINTS[edge as usize];
                            let (ia, da, _) = corner(a);
                            let (ib, db, _) = corner(b);
                            let key = (ia.min(ib), ia.max(ib));
                            let next = vertices.len();
                            let id = *edge_vertex.entry(key).or_insert_with(|| {
                                let denom = da - db;
                                let t = if denom.abs() > 1e-12 {
                                    (da / denom).clamp(0.0, 1.0)
                                } else {
                                    0.5
                                };
                                let ga = self.unravel(ia);
                                let gb = self.unravel(ib);
                                let lerp = |u: usize, v: usize| {
                                    let (a, b) = (self.point(u), self.point(v));
                                    a + t * (b - a)
                                };
                                vertices.push([
                                    lerp(ga[0], gb[0]),
                                    lerp(ga[1], gb[1]),
                                    lerp(ga[2], gb[2]),
                                ]);
                                next
                            });
                            ids[slot] = id;
                        }
                        if ids[0] != ids[1] && ids[1] != ids[2] && ids[2] != ids[0] {
                            triangles.push(ids);
                        }
                    }
                }
            }
        }
        Mesh {
            vertices,
            triangles,
        }
    }

    fn unravel(&self, idx: usize) -> [usize; 3] {
        let x = idx % self.res;
        let y = (idx / self.res) % self.res;
        let z = idx / (self.res * self.res);
        [x, y, z]
    }
}

/// Renders depth from a ring of poses around the reconstruction and fuses
/// them into a surface mesh.
pub fn extract_mesh<T: Real>(
    gs: &GaussianSet<T>,
    resolution: usize,
    image_size: usize,
) -> Result<Mesh> {
    let mut volume = TsdfVolume::new(resolution)?;
    for view in orbit_ring(MESH_VIEWS, MESH_ELEV_DEG, image_size, DEFAULT_FOV_Y_DEG) {
        let out = render_tiled(gs, &view, WHITE, MESH_TILE)?;
        volume.integrate(&out.depth, &view)?;
    }
    Ok(volume.marching_cubes())
}

/// Plain-text OBJ: `v x y z` lines then 1-based `f i j k` lines.
pub fn write_obj(path: &Path, mesh: &Mesh) -> Result<()> {
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    for v in &mesh.vertices {
        writeln!(out, "v {} {} {}", v[0], v[1], v[2])?;
    }
    for t in &mesh.triangles {
        writeln!(out, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1)?;
    }
    out.flush()?;
    Ok(())
}
