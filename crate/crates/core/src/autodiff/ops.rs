//! Differentiable tensor operations.
//!
//! Every op computes its value eagerly from the operands' values and, when an
//! operand is tracked, registers a backward closure that scatters upstream
//! gradient into the operands' slots. Tensors are treated as 2-D (product of
//! leading dims x trailing dim) wherever a matrix view is required.

use std::sync::Arc;

use super::{custom_op, tape_of, GradSink, Var};
use crate::par;
use crate::tensor::{gemm_acc, Real, Tensor};

/// Rows to give each worker in parallel matmul; chunking never affects
/// results because output rows are independent.
const MIN_ROWS_PER_CHUNK: usize = 16;

fn parallel_gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    beta_zero: bool,
    c: &mut [T],
) {
    if trans_a || m <= MIN_ROWS_PER_CHUNK || par::worker_count() == 1 {
        gemm_acc(m, k, n, a, trans_a, b, trans_b, beta_zero, c);
        return;
    }
    let rows_per = MIN_ROWS_PER_CHUNK.max(m.div_ceil(par::worker_count() * 4));
    par::for_each_chunk_mut(c, rows_per * n, |ci, c_chunk| {
        let r0 = ci * rows_per;
        let rows = c_chunk.len() / n;
        gemm_acc(
            rows,
            k,
            n,
            &a[r0 * k..(r0 + rows) * k],
            false,
            b,
            trans_b,
            beta_zero,
            c_chunk,
        );
    });
}

impl<'t, T: Real> Var<'t, T> {
    // ----- elementwise binary -----

    fn zip_op(
        &self,
        other: &Var<'t, T>,
        f: impl Fn(T, T) -> T,
        back: impl Fn(T, T, T) -> (T, T) + 'static,
    ) -> Var<'t, T> {
        assert_eq!(
            self.shape(),
            other.shape(),
            "elementwise op requires equal shapes"
        );
        let out = Tensor::from_vec(
            self.shape().to_vec(),
            self.data()
                .iter()
                .zip(other.data())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        );
        let (la, lb) = (self.data().len(), other.data().len());
        let (na, nb) = (self.node_id(), other.node_id());
        let (va, vb) = (self.value().clone(), other.value().clone());
        custom_op(
            tape_of(&[self, other]),
            out,
            move |og: &[T], sink: &mut GradSink<T>| {
                if let Some(ga) = sink.slot(na, la) {
                    for i in 0..la {
                        ga[i] += back(va.data()[i], vb.data()[i], og[i]).0;
                    }
                }
                if let Some(gb) = sink.slot(nb, lb) {
                    for i in 0..lb {
                        gb[i] += back(va.data()[i], vb.data()[i], og[i]).1;
                    }
                }
            },
        )
    }

    pub fn add(&self, other: &Var<'t, T>) -> Var<'t, T> {
        self.zip_op(other, |a, b| a + b, |_, _, g| (g, g))
    }

    pub fn sub(&self, other: &Var<'t, T>) -> Var<'t, T> {
        self.zip_op(other, |a, b| a - b, |_, _, g| (g, -g))
    }

    pub fn mul(&self, other: &Var<'t, T>) -> Var<'t, T> {
        self.zip_op(other, |a, b| a * b, |a, b, g| (g * b, g * a))
    }

    // ----- elementwise unary -----

    fn map_op(
        &self,
        f: impl Fn(T) -> T,
        // (x, y, og) -> dx
        back: impl Fn(T, T, T) -> T + 'static,
    ) -> Var<'t, T> {
        let out = self.value().map(&f);
        let n = self.data().len();
        let node = self.node_id();
        let x = self.value().clone();
        let y = out.clone();
        custom_op(tape_of(&[self]), out, move |og, sink| {
            if let Some(g) = sink.slot(node, n) {
                for i in 0..n {
                    g[i] += back(x.data()[i], y.data()[i], og[i]);
                }
            }
        })
    }

    pub fn neg(&self) -> Var<'t, T> {
        self.map_op(|x| -x, |_, _, g| -g)
    }

    pub fn add_scalar(&self, s: f64) -> Var<'t, T> {
        let s = T::from_f64(s);
        self.map_op(move |x| x + s, |_, _, g| g)
    }

    pub fn mul_scalar(&self, s: f64) -> Var<'t, T> {
        let s = T::from_f64(s);
        self.map_op(move |x| x * s, move |_, _, g| g * s)
    }

    pub fn exp(&self) -> Var<'t, T> {
        self.map_op(|x| x.exp(), |_, y, g| g * y)
    }

    pub fn sigmoid(&self) -> Var<'t, T> {
        self.map_op(sigmoid_scalar, |_, y, g| g * y * (T::ONE - y))
    }

    pub fn silu(&self) -> Var<'t, T> {
        self.map_op(
            |x| x * sigmoid_scalar(x),
            |x, _, g| {
                let s = sigmoid_scalar(x);
                g * s * (T::ONE + x * (T::ONE - s))
            },
        )
    }

    pub fn softplus(&self) -> Var<'t, T> {
        self.map_op(softplus_scalar, |x, _, g| g * sigmoid_scalar(x))
    }

    /// min(x, cap); gradient passes only below the cap.
    pub fn clamp_max(&self, cap: f64) -> Var<'t, T> {
        let c = T::from_f64(cap);
        self.map_op(
            move |x| x.min(c),
            move |x, _, g| if x < c { g } else { T::ZERO },
        )
    }

    /// max(x, floor); gradient passes only above the floor.
    pub fn clamp_min(&self, floor: f64) -> Var<'t, T> {
        let c = T::from_f64(floor);
        self.map_op(
            move |x| x.max(c),
            move |x, _, g| if x > c { g } else { T::ZERO },
        )
    }

    // ----- reductions -----

    pub fn sum(&self) -> Var<'t, T> {
        let total = self.data().iter().fold(T::ZERO, |acc, &v| acc + v);
        let n = self.data().len();
        let node = self.node_id();
        custom_op(tape_of(&[self]), Tensor::scalar(total), move |og, sink| {
            if let Some(g) = sink.slot(node, n) {
                for gi in g.iter_mut() {
                    *gi += og[0];
                }
            }
        })
    }

    pub fn mean(&self) -> Var<'t, T> {
        let n = self.data().len().max(1);
        self.sum().mul_scalar(1.0 / n as f64)
    }

    // ----- matrix ops -----

    /// (m x k) . (k x n); operands viewed as 2-D via leading-dim flattening.
    pub fn matmul(&self, rhs: &Var<'t, T>) -> Var<'t, T> {
        let (m, k) = (self.value().rows(), self.value().cols());
        let (k2, n) = (rhs.value().rows(), rhs.value().cols());
        assert_eq!(k, k2, "matmul inner dims: {k} vs {k2}");
        let mut out = vec![T::ZERO; m * n];
        parallel_gemm(m, k, n, self.data(), false, rhs.data(), false, true, &mut out);
        let mut shape = self.shape()[..self.shape().len() - 1].to_vec();
        shape.push(n);
        let (na, nb) = (self.node_id(), rhs.node_id());
        let (va, vb) = (self.value().clone(), rhs.value().clone());
        custom_op(
            tape_of(&[self, rhs]),
            Tensor::from_vec(shape, out),
            move |og, sink| {
                if let Some(ga) = sink.slot(na, m * k) {
                    // dA += dY . B^T
                    gemm_acc(m, n, k, og, false, vb.data(), true, false, ga);
                }
                if let Some(gb) = sink.slot(nb, k * n) {
                    // dB += A^T . dY
                    gemm_acc(k, m, n, va.data(), true, og, false, false, gb);
                }
            },
        )
    }

    /// x . w + b with x: (rows x in), w: (in x out), b: (out).
    pub fn linear(&self, w: &Var<'t, T>, b: Option<&Var<'t, T>>) -> Var<'t, T> {
        let y = self.matmul(w);
        match b {
            None => y,
            Some(b) => {
                assert_eq!(b.data().len(), y.value().cols(), "bias length");
                let (rows, cols) = (y.value().rows(), y.value().cols());
                let mut out = y.data().to_vec();
                for r in 0..rows {
                    for c in 0..cols {
                        out[r * cols + c] += b.data()[c];
                    }
                }
                let ny = y.node_id();
                let nb = b.node_id();
                custom_op(
                    tape_of(&[&y, b]),
                    Tensor::from_vec(y.shape().to_vec(), out),
                    move |og, sink| {
                        if let Some(g) = sink.slot(ny, rows * cols) {
                            for (gi, o) in g.iter_mut().zip(og.iter()) {
                                *gi += *o;
                            }
                        }
                        if let Some(gb) = sink.slot(nb, cols) {
                            for r in 0..rows {
                                for c in 0..cols {
                                    gb[c] += og[r * cols + c];
                                }
                            }
                        }
                    },
                )
            }
        }
    }

    // ----- row/column structure -----

    /// out[i, :] = x[idx[i], :]
    pub fn gather_rows(&self, idx: Arc<Vec<u32>>) -> Var<'t, T> {
        let cols = self.value().cols();
        let rows_in = self.value().rows();
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx.iter() {
            let i = i as usize;
            assert!(i < rows_in, "gather_rows index {i} out of {rows_in}");
            out.extend_from_slice(&self.data()[i * cols..(i + 1) * cols]);
        }
        let node = self.node_id();
        let n_in = self.data().len();
        let idx_b = Arc::clone(&idx);
        custom_op(
            tape_of(&[self]),
            Tensor::from_vec(vec![idx.len(), cols], out),
            move |og, sink| {
                if let Some(g) = sink.slot(node, n_in) {
                    for (l, &i) in idx_b.iter().enumerate() {
                        let dst = i as usize * cols;
                        for c in 0..cols {
                            g[dst + c] += og[l * cols + c];
                        }
                    }
                }
            },
        )
    }

    /// Flat element gather; index -1 reads an implicit zero (used for
    /// zero-padded im2col maps).
    pub fn gather_elements(&self, idx: Arc<Vec<i64>>, out_shape: Vec<usize>) -> Var<'t, T> {
        assert_eq!(
            out_shape.iter().product::<usize>(),
            idx.len(),
            "gather_elements shape/index mismatch"
        );
        let src = self.data();
        let out: Vec<T> = idx
            .iter()
            .map(|&i| if i < 0 { T::ZERO } else { src[i as usize] })
            .collect();
        let node = self.node_id();
        let n_in = src.len();
        let idx_b = Arc::clone(&idx);
        custom_op(
            tape_of(&[self]),
            Tensor::from_vec(out_shape, out),
            move |og, sink| {
                if let Some(g) = sink.slot(node, n_in) {
                    for (o, &i) in og.iter().zip(idx_b.iter()) {
                        if i >= 0 {
                            g[i as usize] += *o;
                        }
                    }
                }
            },
        )
    }

    /// Contiguous column band [offset, offset + len) of a 2-D view.
    pub fn narrow_cols(&self, offset: usize, len: usize) -> Var<'t, T> {
        let (rows, cols) = (self.value().rows(), self.value().cols());
        assert!(offset + len <= cols, "narrow_cols out of range");
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&self.data()[r * cols + offset..r * cols + offset + len]);
        }
        let node = self.node_id();
        let n_in = self.data().len();
        custom_op(
            tape_of(&[self]),
            Tensor::from_vec(vec![rows, len], out),
            move |og, sink| {
                if let Some(g) = sink.slot(node, n_in) {
                    for r in 0..rows {
                        for c in 0..len {
                            g[r * cols + offset + c] += og[r * len + c];
                        }
                    }
                }
            },
        )
    }

    // ----- normalization and attention-free mixing -----

    /// Softmax over the trailing dim, numerically stabilized per row.
    pub fn softmax_rows(&self) -> Var<'t, T> {
        let (rows, cols) = (self.value().rows(), self.value().cols());
        let x = self.data();
        let mut out = vec![T::ZERO; rows * cols];
        for r in 0..rows {
            let row = &x[r * cols..(r + 1) * cols];
            let m = row.iter().fold(row[0], |a, &b| a.max(b));
            let mut sum = T::ZERO;
            for c in 0..cols {
                let e = (row[c] - m).exp();
                out[r * cols + c] = e;
                sum += e;
            }
            for c in 0..cols {
                out[r * cols + c] = out[r * cols + c] / sum;
            }
        }
        let y = Tensor::from_vec(self.shape().to_vec(), out);
        let yb = y.clone();
        let node = self.node_id();
        custom_op(tape_of(&[self]), y, move |og, sink| {
            if let Some(g) = sink.slot(node, rows * cols) {
                let y = yb.data();
                for r in 0..rows {
                    let o = r * cols;
                    let mut dot = T::ZERO;
                    for c in 0..cols {
                        dot += og[o + c] * y[o + c];
                    }
                    for c in 0..cols {
                        g[o + c] += y[o + c] * (og[o + c] - dot);
                    }
                }
            }
        })
    }

    /// RMS normalization over the trailing dim with a learned per-channel
    /// gain: y = x / rms(x) * g, rms = sqrt(mean(x^2) + eps).
    pub fn rmsnorm(&self, weight: &Var<'t, T>, eps: f64) -> Var<'t, T> {
        let (rows, cols) = (self.value().rows(), self.value().cols());
        assert_eq!(weight.data().len(), cols, "rmsnorm gain length");
        let eps = T::from_f64(eps);
        let x = self.data();
        let w = weight.data();
        let mut out = vec![T::ZERO; rows * cols];
        let mut inv_rms = vec![T::ZERO; rows];
        for r in 0..rows {
            let row = &x[r * cols..(r + 1) * cols];
            let mut ms = T::ZERO;
            for &v in row {
                ms += v * v;
            }
            ms = ms * T::from_f64(1.0 / cols as f64) + eps;
            let inv = T::ONE / ms.sqrt();
            inv_rms[r] = inv;
            for c in 0..cols {
                out[r * cols + c] = row[c] * inv * w[c];
            }
        }
        let (nx, nw) = (self.node_id(), weight.node_id());
        let (vx, vw) = (self.value().clone(), weight.value().clone());
        custom_op(
            tape_of(&[self, weight]),
            Tensor::from_vec(self.shape().to_vec(), out),
            move |og, sink| {
                let x = vx.data();
                let w = vw.data();
                if let Some(g) = sink.slot(nx, rows * cols) {
                    for r in 0..rows {
                        let o = r * cols;
                        let inv = inv_rms[r];
                        let mut dot = T::ZERO;
                        for c in 0..cols {
                            dot += og[o + c] * w[c] * x[o + c];
                        }
                        let scale = inv * inv * inv * T::from_f64(1.0 / cols as f64) * dot;
                        for c in 0..cols {
                            g[o + c] += og[o + c] * w[c] * inv - x[o + c] * scale;
                        }
                    }
                }
                if let Some(gw) = sink.slot(nw, cols) {
                    for r in 0..rows {
                        let o = r * cols;
                        for c in 0..cols {
                            gw[c] += og[o + c] * x[o + c] * inv_rms[r];
                        }
                    }
                }
            },
        )
    }

    /// Unit-normalizes each row; rows shorter than eps are scaled by 1/eps
    /// so the op stays smooth near zero.
    pub fn normalize_rows(&self, eps: f64) -> Var<'t, T> {
        let (rows, cols) = (self.value().rows(), self.value().cols());
        let eps = T::from_f64(eps);
        let x = self.data();
        let mut out = vec![T::ZERO; rows * cols];
        let mut norms = vec![T::ZERO; rows];
        for r in 0..rows {
            let row = &x[r * cols..(r + 1) * cols];
            let mut sq = T::ZERO;
            for &v in row {
                sq += v * v;
            }
            let n = sq.sqrt().max(eps);
            norms[r] = n;
            for c in 0..cols {
                out[r * cols + c] = row[c] / n;
            }
        }
        let node = self.node_id();
        let vx = self.value().clone();
        let y = Tensor::from_vec(self.shape().to_vec(), out);
        let yb = y.clone();
        custom_op(tape_of(&[self]), y, move |og, sink| {
            if let Some(g) = sink.slot(node, rows * cols) {
                let x = vx.data();
                let y = yb.data();
                for r in 0..rows {
                    let o = r * cols;
                    let n = norms[r];
                    let mut sq = T::ZERO;
                    for c in 0..cols {
                        sq += x[o + c] * x[o + c];
                    }
                    if sq.sqrt() > eps {
                        let mut dot = T::ZERO;
                        for c in 0..cols {
                            dot += og[o + c] * y[o + c];
                        }
                        for c in 0..cols {
                            g[o + c] += (og[o + c] - y[o + c] * dot) / n;
                        }
                    } else {
                        for c in 0..cols {
                            g[o + c] += og[o + c] / eps;
                        }
                    }
                }
            }
        })
    }

    /// Bilinear resample of an (h x w x c) tensor to (h2 x w2 x c) using
    /// half-pixel centers with edge clamping.
    pub fn bilinear_resize(&self, h2: usize, w2: usize) -> Var<'t, T> {
        let shape = self.shape();
        assert_eq!(shape.len(), 3, "bilinear_resize expects h x w x c");
        let (h, w, ch) = (shape[0], shape[1], shape[2]);
        let taps = bilinear_taps(h, w, h2, w2);
        let x = self.data();
        let mut out = vec![T::ZERO; h2 * w2 * ch];
        for (pix, tap) in taps.iter().enumerate() {
            for c in 0..ch {
                let mut acc = T::ZERO;
                for &(src, wgt) in tap {
                    acc += x[src * ch + c] * T::from_f64(wgt);
                }
                out[pix * ch + c] = acc;
            }
        }
        let node = self.node_id();
        let n_in = x.len();
        custom_op(
            tape_of(&[self]),
            Tensor::from_vec(vec![h2, w2, ch], out),
            move |og, sink| {
                if let Some(g) = sink.slot(node, n_in) {
                    for (pix, tap) in taps.iter().enumerate() {
                        for c in 0..ch {
                            let o = og[pix * ch + c];
                            for &(src, wgt) in tap {
                                g[src * ch + c] += o * T::from_f64(wgt);
                            }
                        }
                    }
                }
            },
        )
    }
}

/// Vertical concatenation of equal-width 2-D views.
pub fn concat_rows<'t, T: Real>(parts: &[&Var<'t, T>]) -> Var<'t, T> {
    assert!(!parts.is_empty());
    let cols = parts[0].value().cols();
    let mut data = Vec::new();
    let mut meta = Vec::new(); // (node, row offset, len)
    let mut row0 = 0usize;
    for p in parts {
        assert_eq!(p.value().cols(), cols, "concat_rows column mismatch");
        data.extend_from_slice(p.data());
        let rows = p.value().rows();
        meta.push((p.node_id(), row0 * cols, rows * cols));
        row0 += rows;
    }
    custom_op(
        tape_of(parts),
        Tensor::from_vec(vec![row0, cols], data),
        move |og, sink| {
            for &(node, off, len) in &meta {
                if let Some(g) = sink.slot(node, len) {
                    for i in 0..len {
                        g[i] += og[off + i];
                    }
                }
            }
        },
    )
}

#[inline]
pub(crate) fn sigmoid_scalar<T: Real>(x: T) -> T {
    if x >= T::ZERO {
        T::ONE / (T::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::ONE + e)
    }
}

#[inline]
pub(crate) fn softplus_scalar<T: Real>(x: T) -> T {
    // ln(1 + e^x) = max(x, 0) + ln(1 + e^-|x|)
    x.max(T::ZERO) + (T::ONE + (-x.abs()).exp()).ln()
}

/// Per output pixel: up to four (source pixel, weight) taps.
fn bilinear_taps(h: usize, w: usize, h2: usize, w2: usize) -> Arc<Vec<Vec<(usize, f64)>>> {
    let axis = |n_in: usize, n_out: usize, t: usize| -> (usize, usize, f64) {
        let scale = n_in as f64 / n_out as f64;
        let src = ((t as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, src - i0 as f64)
    };
    let mut taps = Vec::with_capacity(h2 * w2);
    for r in 0..h2 {
        let (r0, r1, fy) = axis(h, h2, r);
        for c in 0..w2 {
            let (c0, c1, fx) = axis(w, w2, c);
            taps.push(vec![
                (r0 * w + c0, (1.0 - fy) * (1.0 - fx)),
                (r0 * w + c1, (1.0 - fy) * fx),
                (r1 * w + c0, fy * (1.0 - fx)),
                (r1 * w + c1, fy * fx),
            ]);
        }
    }
    Arc::new(taps)
}
