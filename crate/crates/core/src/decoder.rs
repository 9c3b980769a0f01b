//! Token-to-Gaussian decoding: a channel-selection MLP feeding constrained
//! attribute heads, plus a categorical rotation head over a frozen table of
//! 32 canonical orientations.
//!
//! Every head is range-safe by construction, for any parameters and inputs:
//! positions are convex combinations of bin centers clamped into [-1,1]^3,
//! scales are softplus-scaled and clamped into (0, s_max], opacities are
//! sigmoids clamped into the open unit interval, colors are sigmoids, and
//! rotations are unit quaternions (a normalized soft mixture during
//! training, an exact table row at inference).

use crate::autodiff::{custom_op, tape_of, Var};
use crate::error::{Error, Result};
use crate::geometry::canonical_rotations;
use crate::rng::Stream;
use crate::tensor::{Real, Tensor};

/// Number of entries in the canonical rotation table.
pub const ROT_CLASSES: usize = 32;

const SCALE_FLOOR: f64 = 1e-12;
const OPACITY_MARGIN: f64 = 1e-7;

/// Decoder parameters as tape handles, plus the fixed head configuration.
pub struct DecoderVars<'t, T: Real> {
    pub mlp_w1: Var<'t, T>,
    pub mlp_b1: Var<'t, T>,
    pub mlp_w2: Var<'t, T>,
    pub mlp_b2: Var<'t, T>,
    pub pos_w: Var<'t, T>,
    pub pos_b: Var<'t, T>,
    pub scale_w: Var<'t, T>,
    pub scale_b: Var<'t, T>,
    pub opacity_w: Var<'t, T>,
    pub opacity_b: Var<'t, T>,
    pub color_w: Var<'t, T>,
    pub color_b: Var<'t, T>,
    pub rot_w: Var<'t, T>,
    pub rot_b: Var<'t, T>,
    pub n_bins: usize,
    pub s_base: f64,
    pub s_max: f64,
    pub disk: bool,
    pub straight_through: bool,
}

/// One decoded primitive batch with gradients attached.
pub struct GaussianVars<'t, T: Real> {
    /// Centers, [K,3] in [-1,1]^3.
    pub mu: Var<'t, T>,
    /// Axis scales, [K,3] (volumetric) or [K,2] (oriented disks), positive.
    pub scale: Var<'t, T>,
    /// RGB in [0,1], [K,3].
    pub color: Var<'t, T>,
    /// Opacity in (0,1), [K,1].
    pub opacity: Var<'t, T>,
    /// Unit quaternions, w-first, [K,4].
    pub rot: Var<'t, T>,
    pub disk: bool,
}

/// Detached primitive batch for rendering oracles, export, and meshing.
#[derive(Clone)]
pub struct GaussianSet<T: Real> {
    pub mu: Tensor<T>,
    pub scale: Tensor<T>,
    pub color: Tensor<T>,
    pub opacity: Tensor<T>,
    pub rot: Tensor<T>,
    pub disk: bool,
}

impl<'t, T: Real> GaussianVars<'t, T> {
    pub fn count(&self) -> usize {
        self.mu.value().rows()
    }

    /// Copies the current values out of the tape.
    pub fn snapshot(&self) -> GaussianSet<T> {
        GaussianSet {
            mu: self.mu.value().clone(),
            scale: self.scale.value().clone(),
            color: self.color.value().clone(),
            opacity: self.opacity.value().clone(),
            rot: self.rot.value().clone(),
            disk: self.disk,
        }
    }
}

impl<T: Real> GaussianSet<T> {
    pub fn count(&self) -> usize {
        self.mu.rows()
    }

    /// Checks every range invariant the decoder promises.
    pub fn validate(&self) -> Result<()> {
        let k = self.count();
        let s_cols = if self.disk { 2 } else { 3 };
        if self.mu.shape() != [k, 3]
            || self.scale.shape() != [k, s_cols]
            || self.color.shape() != [k, 3]
            || self.opacity.shape() != [k, 1]
            || self.rot.shape() != [k, 4]
        {
            return Err(Error::shape(format!(
                "inconsistent attribute shapes for {k} primitives"
            )));
        }
        for (i, &v) in self.mu.data().iter().enumerate() {
            if !(v.to_f64().abs() <= 1.0) {
                return Err(Error::invalid(format!("mu[{i}] = {v} outside [-1,1]")));
            }
        }
        for (i, &v) in self.scale.data().iter().enumerate() {
            if !(v.to_f64() > 0.0) {
                return Err(Error::invalid(format!("scale[{i}] = {v} is not positive")));
            }
        }
        for (i, &v) in self.color.data().iter().enumerate() {
            if !(0.0..=1.0).contains(&v.to_f64()) {
                return Err(Error::invalid(format!("color[{i}] = {v} outside [0,1]")));
            }
        }
        for (i, &v) in self.opacity.data().iter().enumerate() {
            let a = v.to_f64();
            if !(a > 0.0 && a < 1.0) {
                return Err(Error::invalid(format!("opacity[{i}] = {v} outside (0,1)")));
            }
        }
        for r in 0..k {
            let q = &self.rot.data()[r * 4..(r + 1) * 4];
            let norm: f64 = q.iter().map(|v| v.to_f64() * v.to_f64()).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-5 {
                return Err(Error::invalid(format!("rot[{r}] has norm {norm}")));
            }
        }
        Ok(())
    }
}

/// Hidden channel-selection layer: C -> 4C -> C with SiLU.
pub fn channel_mlp<'t, T: Real>(
    x: &Var<'t, T>,
    w1: &Var<'t, T>,
    b1: &Var<'t, T>,
    w2: &Var<'t, T>,
    b2: &Var<'t, T>,
) -> Result<Var<'t, T>> {
    let c = x.value().cols();
    if w1.shape() != [c, 4 * c] || w2.shape() != [4 * c, c] {
        return Err(Error::shape(format!(
            "mlp weights {:?}/{:?} do not form {c} -> {} -> {c}",
            w1.shape(),
            w2.shape(),
            4 * c
        )));
    }
    Ok(x.linear(w1, Some(b1)).silu().linear(w2, Some(b2)))
}

/// Evenly spaced bin centers spanning [-1, 1] inclusive, as a [B,1] column.
pub fn bin_centers<T: Real>(n_bins: usize) -> Tensor<T> {
    assert!(n_bins >= 2, "need at least two position bins");
    let step = 2.0 / (n_bins - 1) as f64;
    Tensor::from_vec(
        vec![n_bins, 1],
        (0..n_bins)
            .map(|b| T::from_f64(-1.0 + step * b as f64))
            .collect(),
    )
}

/// Positions as per-axis softmax expectations over the bin centers.
pub fn decode_position<'t, T: Real>(
    z: &Var<'t, T>,
    w: &Var<'t, T>,
    b: &Var<'t, T>,
    n_bins: usize,
) -> Result<Var<'t, T>> {
    let k = z.value().rows();
    let logits = z.linear(w, Some(b));
    if logits.value().cols() != 3 * n_bins {
        return Err(Error::shape(format!(
            "position head emits {} columns, want 3 x {n_bins}",
            logits.value().cols()
        )));
    }
    let probs = logits.reshape(vec![3 * k, n_bins]).softmax_rows();
    let mu = probs.matmul(&Var::constant(bin_centers::<T>(n_bins)));
    Ok(mu
        .reshape(vec![k, 3])
        .clamp_max(1.0)
        .clamp_min(-1.0))
}

/// Scales: s_base * softplus(head), kept inside (0, s_max].
pub fn decode_scale<'t, T: Real>(
    z: &Var<'t, T>,
    w: &Var<'t, T>,
    b: &Var<'t, T>,
    s_base: f64,
    s_max: f64,
) -> Result<Var<'t, T>> {
    let cols = w.value().cols();
    if cols != 2 && cols != 3 {
        return Err(Error::shape(format!("scale head has width {cols}, want 2 or 3")));
    }
    Ok(z.linear(w, Some(b))
        .softplus()
        .mul_scalar(s_base)
        .clamp_max(s_max)
        .clamp_min(SCALE_FLOOR))
}

/// Opacity: sigmoid squeezed to stay strictly inside (0,1) even when the
/// logit saturates in floating point.
pub fn decode_opacity<'t, T: Real>(
    z: &Var<'t, T>,
    w: &Var<'t, T>,
    b: &Var<'t, T>,
) -> Result<Var<'t, T>> {
    if w.value().cols() != 1 {
        return Err(Error::shape(format!(
            "opacity head has width {}, want 1",
            w.value().cols()
        )));
    }
    Ok(z.linear(w, Some(b))
        .sigmoid()
        .clamp_max(1.0 - OPACITY_MARGIN)
        .clamp_min(OPACITY_MARGIN))
}

/// View-independent RGB via sigmoid.
pub fn decode_color<'t, T: Real>(
    z: &Var<'t, T>,
    w: &Var<'t, T>,
    b: &Var<'t, T>,
) -> Result<Var<'t, T>> {
    if w.value().cols() != 3 {
        return Err(Error::shape(format!(
            "color head has width {}, want 3",
            w.value().cols()
        )));
    }
    Ok(z.linear(w, Some(b)).sigmoid())
}

/// The frozen rotation table as a [32,4] tensor, w-first rows.
pub fn rotation_table<T: Real>() -> Tensor<T> {
    let mut data = Vec::with_capacity(ROT_CLASSES * 4);
    for q in canonical_rotations() {
        data.extend([q.w, q.x, q.y, q.z].map(T::from_f64));
    }
    Tensor::from_vec(vec![ROT_CLASSES, 4], data)
}

/// Gumbel draws for one decode pass, [K,32], keyed by token index so each
/// token's noise is independent of sequence length and batch position.
pub fn gumbel_noise<T: Real>(stream: &Stream, count: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(count * ROT_CLASSES);
    for k in 0..count {
        let sub = stream.substream(k as u64);
        data.extend((0..ROT_CLASSES).map(|j| T::from_f64(sub.gumbel_at(j as u64))));
    }
    Tensor::from_vec(vec![count, ROT_CLASSES], data)
}

/// How the rotation head resolves its categorical choice.
pub enum RotMode<'a, T: Real> {
    /// Gumbel-softmax relaxation at temperature tau with pre-drawn noise.
    Train { tau: f64, noise: &'a Tensor<T> },
    /// Deterministic argmax over the raw logits.
    Infer,
}

fn argmax_rows<T: Real>(m: &Tensor<T>) -> Vec<usize> {
    let (rows, cols) = (m.rows(), m.cols());
    (0..rows)
        .map(|r| {
            let row = &m.data()[r * cols..(r + 1) * cols];
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

fn hard_outputs<T: Real>(choice: &[usize]) -> (Tensor<T>, Tensor<T>) {
    let table = rotation_table::<T>();
    let k = choice.len();
    let mut q = Vec::with_capacity(k * 4);
    let mut p = vec![T::ZERO; k * ROT_CLASSES];
    for (r, &j) in choice.iter().enumerate() {
        q.extend_from_slice(&table.data()[j * 4..(j + 1) * 4]);
        p[r * ROT_CLASSES + j] = T::ONE;
    }
    (
        Tensor::from_vec(vec![k, 4], q),
        Tensor::from_vec(vec![k, ROT_CLASSES], p),
    )
}

/// Rotation head: logits over the canonical table, resolved per `mode`.
/// Returns unit quaternions [K,4] and class probabilities [K,32].
pub fn rotnet<'t, T: Real>(
    z: &Var<'t, T>,
    w: &Var<'t, T>,
    b: &Var<'t, T>,
    mode: RotMode<'_, T>,
    straight_through: bool,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    if w.value().cols() != ROT_CLASSES {
        return Err(Error::shape(format!(
            "rotation head has width {}, want {ROT_CLASSES}",
            w.value().cols()
        )));
    }
    let logits = z.linear(w, Some(b));
    let k = logits.value().rows();
    match mode {
        RotMode::Infer => {
            let (q, p) = hard_outputs::<T>(&argmax_rows(logits.value()));
            Ok((Var::constant(q), Var::constant(p)))
        }
        RotMode::Train { tau, noise } => {
            if !(tau > 0.0) {
                return Err(Error::invalid(format!(
                    "temperature {tau} must be positive in train mode"
                )));
            }
            if noise.shape() != [k, ROT_CLASSES] {
                return Err(Error::shape(format!(
                    "gumbel noise shape {:?}, want [{k}, {ROT_CLASSES}]",
                    noise.shape()
                )));
            }
            let perturbed = logits
                .add(&Var::constant(noise.clone()))
                .mul_scalar(1.0 / tau);
            let p = perturbed.softmax_rows();
            let q = p
                .matmul(&Var::constant(rotation_table::<T>()))
                .normalize_rows(1e-12);
            if straight_through {
                let (q_hard, _) = hard_outputs::<T>(&argmax_rows(perturbed.value()));
                let node = q.node_id();
                let st = custom_op(tape_of(&[&q]), q_hard, move |dy, sink| {
                    if let Some(g) = sink.slot(node, k * 4) {
                        for (gi, &d) in g.iter_mut().zip(dy) {
                            *gi += d;
                        }
                    }
                });
                Ok((st, p))
            } else {
                Ok((q, p))
            }
        }
    }
}

/// Exponential temperature decay from 2 to 0.01 across the whole run.
pub fn temperature_at(step: usize, total_steps: usize) -> f64 {
    const START: f64 = 2.0;
    const END: f64 = 0.01;
    if total_steps <= 1 {
        return END;
    }
    let t = (step.min(total_steps - 1)) as f64 / (total_steps - 1) as f64;
    START * (END / START).powf(t)
}

/// Decodes every token of a causal sequence into one Gaussian primitive.
pub fn decode_gaussians<'t, T: Real>(
    seq: &Var<'t, T>,
    p: &DecoderVars<'t, T>,
    mode: RotMode<'_, T>,
) -> Result<GaussianVars<'t, T>> {
    let want_scale = if p.disk { 2 } else { 3 };
    if p.scale_w.value().cols() != want_scale {
        return Err(Error::shape(format!(
            "scale head width {} does not match the {} mode",
            p.scale_w.value().cols(),
            if p.disk { "disk" } else { "volumetric" }
        )));
    }
    let z = channel_mlp(seq, &p.mlp_w1, &p.mlp_b1, &p.mlp_w2, &p.mlp_b2)?;
    let mu = decode_position(&z, &p.pos_w, &p.pos_b, p.n_bins)?;
    let scale = decode_scale(&z, &p.scale_w, &p.scale_b, p.s_base, p.s_max)?;
    let opacity = decode_opacity(&z, &p.opacity_w, &p.opacity_b)?;
    let color = decode_color(&z, &p.color_w, &p.color_b)?;
    let (rot, _) = rotnet(&z, &p.rot_w, &p.rot_b, mode, p.straight_through)?;
    Ok(GaussianVars {
        mu,
        scale,
        color,
        opacity,
        rot,
        disk: p.disk,
    })
}
