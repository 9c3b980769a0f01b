//! Pixel-to-token front end: ray fusion, patch embedding, cross-scan
//! serialization, and the learned positional table.
//!
//! A posed view becomes an H x W x 9 fused map (RGB plus Pluecker ray
//! channels), is cut into non-overlapping p x p patches that embed linearly
//! into C-wide tokens, and every view's token grid is serialized four ways
//! (row-major, reversed, column-major, reversed-column). Views are
//! concatenated in input order, so the causal model always sees earlier
//! views in full before later ones. Sequence length is 4 * N * h * w.

use std::sync::Arc;

use crate::autodiff::{concat_rows, Var};
use crate::error::{Error, Result};
use crate::geometry::RayMap;
use crate::tensor::{Real, Tensor};

pub const FUSED_CHANNELS: usize = 9;
pub const SCAN_DIRECTIONS: usize = 4;

/// H x W pixels, each carrying [R, G, B, d_x, d_y, d_z, m_x, m_y, m_z],
/// stored as an (H*W) x 9 matrix.
pub struct FusedView<T> {
    pub height: usize,
    pub width: usize,
    pub pixels: Tensor<T>,
}

/// Where a sequence token came from: source view, scan direction (0 =
/// row-major, 1 = reversed, 2 = column-major, 3 = reversed-column), and the
/// token-grid cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Provenance {
    pub view: u32,
    pub direction: u32,
    pub row: u32,
    pub col: u32,
}

/// Joins an [H, W, 3] image in [0, 1] with its per-pixel ray map.
pub fn fuse_view<T: Real>(image: &Tensor<T>, rays: &RayMap) -> Result<FusedView<T>> {
    if image.shape() != [rays.height, rays.width, 3] {
        return Err(Error::shape(format!(
            "image shape {:?} does not match a {} x {} x 3 ray map",
            image.shape(),
            rays.height,
            rays.width
        )));
    }
    let n = rays.height * rays.width;
    let rgb = image.data();
    let ray = rays.data();
    let mut out = Vec::with_capacity(n * FUSED_CHANNELS);
    for p in 0..n {
        for c in 0..3 {
            let v = rgb[p * 3 + c].to_f64();
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!(
                    "RGB value {v} at pixel {p} is outside [0, 1]"
                )));
            }
            out.push(rgb[p * 3 + c]);
        }
        for c in 0..6 {
            out.push(T::from_f64(ray[p * 6 + c]));
        }
    }
    Ok(FusedView {
        height: rays.height,
        width: rays.width,
        pixels: Tensor::from_vec(vec![n, FUSED_CHANNELS], out),
    })
}

/// Pixel-row gather order that lays every p x p patch out contiguously:
/// patches in row-major grid order, pixels row-major within each patch.
pub fn patch_grid_indices(height: usize, width: usize, patch: usize) -> Result<Arc<Vec<u32>>> {
    if patch == 0 || height % patch != 0 || width % patch != 0 {
        return Err(Error::invalid(format!(
            "patch {patch} does not divide {height} x {width}"
        )));
    }
    let (h, w) = (height / patch, width / patch);
    let mut idx = Vec::with_capacity(height * width);
    for pr in 0..h {
        for pc in 0..w {
            for dy in 0..patch {
                for dx in 0..patch {
                    idx.push(((pr * patch + dy) * width + (pc * patch + dx)) as u32);
                }
            }
        }
    }
    Ok(Arc::new(idx))
}

/// Non-overlapping patch embedding: kernel is (p*p*9) x C with input
/// features ordered (pixel row, pixel col, channel); output is (h*w) x C.
pub fn patch_embed<'t, T: Real>(
    pixels: &Var<'t, T>,
    height: usize,
    width: usize,
    patch: usize,
    kernel: &Var<'t, T>,
    bias: &Var<'t, T>,
) -> Result<Var<'t, T>> {
    if pixels.shape() != [height * width, FUSED_CHANNELS] {
        return Err(Error::shape(format!(
            "fused pixels shape {:?}, want [{}, {FUSED_CHANNELS}]",
            pixels.shape(),
            height * width
        )));
    }
    let per_patch = patch * patch * FUSED_CHANNELS;
    if kernel.shape() != [per_patch, kernel.value().cols()] {
        return Err(Error::shape(format!(
            "kernel shape {:?}, want [{per_patch}, C]",
            kernel.shape()
        )));
    }
    let idx = patch_grid_indices(height, width, patch)?;
    let tokens = (height / patch) * (width / patch);
    let grouped = pixels
        .gather_rows(idx)
        .reshape(vec![tokens, per_patch]);
    Ok(grouped.linear(kernel, Some(bias)))
}

/// The four traversal orders of an h x w grid, as row-major cell indices.
pub fn scan_orders(h: usize, w: usize) -> [Vec<u32>; 4] {
    let row: Vec<u32> = (0..(h * w) as u32).collect();
    let mut rev = row.clone();
    rev.reverse();
    let mut col = Vec::with_capacity(h * w);
    for c in 0..w {
        for r in 0..h {
            col.push((r * w + c) as u32);
        }
    }
    let mut col_rev = col.clone();
    col_rev.reverse();
    [row, rev, col, col_rev]
}

/// Serializes N view grids (each (h*w) x C) into one 4*N*h*w x C sequence:
/// per view, the four traversal orders back to back; views in input order.
pub fn cross_scan<'t, T: Real>(
    grids: &[Var<'t, T>],
    h: usize,
    w: usize,
) -> Result<(Var<'t, T>, Vec<Provenance>)> {
    if grids.is_empty() {
        return Err(Error::invalid("cross_scan needs at least one view"));
    }
    let cols = grids[0].value().cols();
    for (i, g) in grids.iter().enumerate() {
        if g.shape() != [h * w, cols] {
            return Err(Error::shape(format!(
                "view {i} grid shape {:?}, want [{}, {cols}]",
                g.shape(),
                h * w
            )));
        }
    }
    let orders = scan_orders(h, w);
    let n_views = grids.len();
    let mut idx = Vec::with_capacity(SCAN_DIRECTIONS * n_views * h * w);
    let mut prov = Vec::with_capacity(idx.capacity());
    for (view, _) in grids.iter().enumerate() {
        for (dir, order) in orders.iter().enumerate() {
            for &cell in order {
                idx.push((view * h * w) as u32 + cell);
                prov.push(Provenance {
                    view: view as u32,
                    direction: dir as u32,
                    row: cell / w as u32,
                    col: cell % w as u32,
                });
            }
        }
    }
    let refs: Vec<&Var<'t, T>> = grids.iter().collect();
    let stacked = concat_rows(&refs);
    Ok((stacked.gather_rows(Arc::new(idx)), prov))
}

/// Folds a scanned sequence back into N view grids, averaging the four
/// directional copies of every cell. Rejects provenance that is not a
/// bijection onto views x directions x cells.
pub fn inverse_scan<T: Real>(
    seq: &Tensor<T>,
    prov: &[Provenance],
    n_views: usize,
    h: usize,
    w: usize,
) -> Result<Vec<Tensor<T>>> {
    let l = SCAN_DIRECTIONS * n_views * h * w;
    if seq.rows() != l || prov.len() != l {
        return Err(Error::shape(format!(
            "sequence has {} rows and {} provenance entries, want {l}",
            seq.rows(),
            prov.len()
        )));
    }
    let mut seen = vec![false; l];
    for p in prov {
        let (view, dir) = (p.view as usize, p.direction as usize);
        let (r, c) = (p.row as usize, p.col as usize);
        if view >= n_views || dir >= SCAN_DIRECTIONS || r >= h || c >= w {
            return Err(Error::invalid(format!("provenance {p:?} out of range")));
        }
        let slot = ((view * SCAN_DIRECTIONS + dir) * h + r) * w + c;
        if seen[slot] {
            return Err(Error::invalid(format!("provenance {p:?} duplicated")));
        }
        seen[slot] = true;
    }
    let cols = seq.cols();
    let quarter = T::from_f64(1.0 / SCAN_DIRECTIONS as f64);
    let mut grids = vec![vec![T::ZERO; h * w * cols]; n_views];
    for (t, p) in prov.iter().enumerate() {
        let cell = (p.row as usize * w + p.col as usize) * cols;
        let dst = &mut grids[p.view as usize][cell..cell + cols];
        let src = &seq.data()[t * cols..(t + 1) * cols];
        for (d, s) in dst.iter_mut().zip(src) {
            *d += *s * quarter;
        }
    }
    Ok(grids
        .into_iter()
        .map(|g| Tensor::from_vec(vec![h * w, cols], g))
        .collect())
}

/// Adds the learned positional table elementwise; lengths must agree.
pub fn add_positional<'t, T: Real>(
    seq: &Var<'t, T>,
    table: &Var<'t, T>,
) -> Result<Var<'t, T>> {
    if seq.shape() != table.shape() {
        return Err(Error::shape(format!(
            "sequence shape {:?} vs positional table {:?}",
            seq.shape(),
            table.shape()
        )));
    }
    Ok(seq.add(table))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::geometry::{pluecker_rays, CameraView, Vec3};
    use approx::assert_relative_eq;

    fn forward_ray_map(height: usize, width: usize) -> RayMap {
        let mut data = Vec::with_capacity(height * width * 6);
        for _ in 0..height * width {
            data.extend_from_slice(&[0.0, 0.0, -1.0, 0.0, 0.0, 0.0]);
        }
        RayMap::from_raw(height, width, data).unwrap()
    }

    #[test]
    fn fusion_fixes_the_channel_order() {
        let img: Tensor<f64> = Tensor::zeros(vec![2, 2, 3]);
        let fused = fuse_view(&img, &forward_ray_map(2, 2)).unwrap();
        assert_eq!(fused.pixels.shape(), [4, 9]);
        for p in 0..4 {
            let row = &fused.pixels.data()[p * 9..(p + 1) * 9];
            assert_eq!(row, [0.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn fusion_round_trips_and_rejects_bad_shapes() {
        let cam = CameraView::look_at(
            Vec3::new(0.3, 0.2, 1.5),
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(0.0, 1.0, 0.0),
            40.0,
            3,
            2,
        );
        let rays = pluecker_rays(&cam);
        let img: Tensor<f64> =
            Tensor::from_vec(vec![2, 3, 3], (0..18).map(|i| i as f64 / 17.0).collect());
        let fused = fuse_view(&img, &rays).unwrap();
        for p in 0..6 {
            let row = &fused.pixels.data()[p * 9..(p + 1) * 9];
            assert_eq!(&row[..3], &img.data()[p * 3..(p + 1) * 3]);
            assert_eq!(&row[3..], &rays.data()[p * 6..(p + 1) * 6]);
        }
        let narrow: Tensor<f64> = Tensor::zeros(vec![2, 2, 3]);
        assert!(fuse_view(&narrow, &rays).is_err());
        let hot: Tensor<f64> = Tensor::full(vec![2, 3, 3], 1.5);
        assert!(fuse_view(&hot, &rays).is_err());
    }

    #[test]
    fn patch_embedding_is_local_and_linear() {
        let (height, width, patch, c_out) = (8, 8, 4, 5);
        let n = height * width;
        let per_patch = patch * patch * FUSED_CHANNELS;
        let px: Vec<f64> = (0..n * 9).map(|i| (i as f64 * 0.37).sin() * 0.3).collect();
        let kernel: Vec<f64> = (0..per_patch * c_out)
            .map(|i| (i as f64 * 0.11).cos() * 0.1)
            .collect();
        let bias: Vec<f64> = (0..c_out).map(|i| i as f64 * 0.01).collect();
        let run = |px: &[f64]| -> Vec<f64> {
            let p = Var::constant(Tensor::from_vec(vec![n, 9], px.to_vec()));
            let k = Var::constant(Tensor::from_vec(vec![per_patch, c_out], kernel.clone()));
            let b = Var::constant(Tensor::from_vec(vec![c_out], bias.clone()));
            patch_embed(&p, height, width, patch, &k, &b)
                .unwrap()
                .data()
                .to_vec()
        };
        let base = run(&px);
        assert_eq!(base.len(), 4 * c_out);

        // touching one pixel inside patch (0, 0) moves only token 0
        let mut poked = px.clone();
        poked[2 * width * 9] += 1.0;
        let moved = run(&poked);
        assert_ne!(&moved[..c_out], &base[..c_out]);
        assert_eq!(&moved[c_out..], &base[c_out..]);

        // doubling the input doubles (output - bias)
        let twice: Vec<f64> = px.iter().map(|v| v * 2.0).collect();
        let doubled = run(&twice);
        for t in 0..4 {
            for c in 0..c_out {
                assert_relative_eq!(
                    doubled[t * c_out + c] - bias[c],
                    2.0 * (base[t * c_out + c] - bias[c]),
                    epsilon = 1e-12
                );
            }
        }
    }

    #[test]
    fn constant_input_gives_identical_tokens() {
        let (height, width, patch, c_out) = (8, 8, 2, 3);
        let per_patch = patch * patch * FUSED_CHANNELS;
        let p = Var::constant(Tensor::full(vec![height * width, 9], 0.25f64));
        let k = Var::constant(Tensor::from_vec(
            vec![per_patch, c_out],
            (0..per_patch * c_out).map(|i| (i as f64).sin()).collect(),
        ));
        let b = Var::constant(Tensor::zeros(vec![c_out]));
        let out = patch_embed(&p, height, width, patch, &k, &b).unwrap();
        let first = &out.data()[..c_out];
        for t in 1..16 {
            for c in 0..c_out {
                assert_relative_eq!(out.data()[t * c_out + c], first[c], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn paper_scale_grid_has_1024_patches_per_view() {
        let idx = patch_grid_indices(448, 448, 14).unwrap();
        assert_eq!(idx.len(), 448 * 448);
        assert_eq!(idx.len() / (14 * 14), 1024);
        assert!(patch_grid_indices(448, 448, 15).is_err());
    }

    #[test]
    fn two_by_two_scan_matches_the_frozen_example() {
        // grid [a b; c d] with values 1, 2, 3, 4
        let g = Var::constant(Tensor::from_vec(vec![4, 1], vec![1.0, 2.0, 3.0, 4.0f64]));
        let (seq, prov) = cross_scan(&[g], 2, 2).unwrap();
        let want = [
            1.0, 2.0, 3.0, 4.0, // row-major
            4.0, 3.0, 2.0, 1.0, // reversed
            1.0, 3.0, 2.0, 4.0, // column-major
            4.0, 2.0, 3.0, 1.0, // reversed-column
        ];
        assert_eq!(seq.data(), want);
        assert_eq!(prov.len(), 16);
        assert_eq!(
            (prov[4].direction, prov[4].row, prov[4].col),
            (1, 1, 1),
            "reversed traversal starts at the last cell"
        );
    }

    #[test]
    fn sequence_is_view_major_and_paper_length() {
        let (h, w, views) = (32, 32, 4);
        let grids: Vec<Var<f64>> = (0..views)
            .map(|v| Var::constant(Tensor::full(vec![h * w, 1], v as f64)))
            .collect();
        let (seq, prov) = cross_scan(&grids, h, w).unwrap();
        assert_eq!(seq.shape(), [4 * views * h * w, 1]);
        assert_eq!(seq.shape()[0], 16384);
        let mut last_view = 0;
        for p in &prov {
            assert!(p.view >= last_view, "views must appear in blocks");
            last_view = p.view;
        }
        for (t, p) in prov.iter().enumerate() {
            assert_eq!(seq.data()[t], p.view as f64);
        }
    }

    #[test]
    fn inverse_scan_averages_back_to_the_grids() {
        let (h, w) = (3, 2);
        let a: Vec<f64> = (0..h * w * 2).map(|i| i as f64 * 0.5).collect();
        let b: Vec<f64> = (0..h * w * 2).map(|i| (i as f64).cos()).collect();
        let ga = Var::constant(Tensor::from_vec(vec![h * w, 2], a.clone()));
        let gb = Var::constant(Tensor::from_vec(vec![h * w, 2], b.clone()));
        let (seq, prov) = cross_scan(&[ga, gb], h, w).unwrap();
        let grids = inverse_scan(seq.value(), &prov, 2, h, w).unwrap();
        for (got, want) in grids[0].data().iter().zip(&a) {
            assert_relative_eq!(got, want, epsilon = 1e-12);
        }
        for (got, want) in grids[1].data().iter().zip(&b) {
            assert_relative_eq!(got, want, epsilon = 1e-12);
        }

        // perturbing one directional copy moves its cell by delta / 4
        let mut bumped = seq.value().data().to_vec();
        bumped[0] += 2.0;
        let bt = Tensor::from_vec(vec![prov.len(), 2], bumped);
        let again = inverse_scan(&bt, &prov, 2, h, w).unwrap();
        assert_relative_eq!(again[0].data()[0], a[0] + 0.5, epsilon = 1e-12);

        // corrupted provenance is rejected
        let mut broken = prov.clone();
        broken[1] = broken[0];
        assert!(inverse_scan(seq.value(), &broken, 2, h, w).is_err());
    }

    #[test]
    fn positional_table_adds_and_differentiates() {
        let tape: Tape<f64> = Tape::new();
        let seq = tape.leaf(Tensor::from_vec(vec![4, 2], vec![0.0; 8]));
        let e = tape.leaf(Tensor::from_vec(
            vec![4, 2],
            (0..8).map(|i| i as f64).collect(),
        ));
        let zero = Var::constant(Tensor::zeros(vec![4, 2]));
        let same = add_positional(&seq, &zero).unwrap();
        assert_eq!(same.data(), seq.data());

        let once = add_positional(&seq, &e).unwrap();
        let twice = add_positional(&once, &e).unwrap();
        for i in 0..8 {
            assert_relative_eq!(twice.data()[i], 2.0 * i as f64);
        }
        let total = twice.sum();
        tape.backward(&total).unwrap();
        assert_eq!(tape.grad(&e).unwrap(), vec![2.0; 8]);

        let short = Var::constant(Tensor::zeros(vec![3, 2]));
        assert!(add_positional(&seq, &short).is_err());
    }
}
