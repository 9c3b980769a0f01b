//! Procedural training data, input-view augmentations, the optimization
//! loop, and held-out evaluation.
//!
//! Ground truth is synthetic: connected blobs of random Gaussians rendered
//! by the reference rasterizer, so the representation can express every
//! target exactly and overfitting measures real capability. All randomness
//! flows through counter streams keyed by (seed, purpose, absolute step),
//! which makes runs reproducible byte-for-byte and lets a resumed run
//! continue the exact draw sequence of an uninterrupted one. The training
//! dtype is f32 end to end, matching the checkpoint payload, so a
//! save/load round trip is lossless.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::autodiff::{clip_grad_norm, lr_at, AdamW, AdamWConfig, Tape, Var};
use crate::decoder::{gumbel_noise, temperature_at, RotMode};
use crate::error::{Error, Result};
use crate::geometry::{
    mat_mul, sample_orbit_cameras, CameraView, Mat3, Vec3, DEFAULT_FOV_Y_DEG,
};
use crate::loss::{composite_loss, LossReport, LossWeights, Perceptual, ViewTarget};
use crate::model::{
    forward, load_checkpoint, render_views, restore_optimizer, save_checkpoint, ModelConfig,
    ParamStore,
};
use crate::par;
use crate::rng::Stream;
use crate::splat::{render_reference, render_tiled, GaussianSet, WHITE};
use crate::tensor::{Real, Tensor};

const DISTORT_GRID: usize = 8;
const DISTORT_CAP_PX: f64 = 4.0;
const JITTER_CAP_DEG: f64 = 5.0;
const JITTER_CAP_SHIFT: f64 = 0.05;
const RENDER_TILE: usize = 16;

/// Everything the loop needs, readable from a flat key=value file.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub steps: usize,
    pub batch_size: usize,
    /// Supervision views beyond the inputs, re-sampled every step.
    pub n_novel: usize,
    pub k_gaussians: usize,
    /// Training-scene pool size; 1 overfits a single scene.
    pub n_scenes: usize,
    pub lr_peak: f64,
    pub lr_floor: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub clip_norm: f64,
    pub weights: LossWeights,
    pub perceptual: Perceptual,
    pub augment_prob: f64,
    pub distortion_strength: f64,
    pub jitter_magnitude: f64,
    pub checkpoint_every: usize,
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::desk(),
            steps: 2000,
            batch_size: 4,
            n_novel: 6,
            k_gaussians: 64,
            n_scenes: 1,
            lr_peak: 1e-3,
            lr_floor: 1e-5,
            warmup_steps: 100,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.95,
            adam_eps: 1e-8,
            clip_norm: 1.0,
            weights: LossWeights::default(),
            perceptual: Perceptual::Off,
            augment_prob: 0.3,
            distortion_strength: 1.0,
            jitter_magnitude: 1.0,
            checkpoint_every: 200,
            eval_every: 100,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.weights.validate()?;
        for (name, v) in [
            ("steps", self.steps),
            ("batch_size", self.batch_size),
            ("k_gaussians", self.k_gaussians),
            ("n_scenes", self.n_scenes),
            ("checkpoint_every", self.checkpoint_every),
            ("eval_every", self.eval_every),
        ] {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be at least 1")));
            }
        }
        for (name, v) in [
            ("augment_prob", self.augment_prob),
            ("distortion_strength", self.distortion_strength),
            ("jitter_magnitude", self.jitter_magnitude),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!("{name} = {v} is outside [0, 1]")));
            }
        }
        if !(self.lr_peak.is_finite() && self.lr_floor.is_finite()) {
            return Err(Error::invalid("learning rates must be finite"));
        }
        if self.lr_peak <= 0.0 || self.lr_floor < 0.0 || self.lr_floor > self.lr_peak {
            return Err(Error::invalid(format!(
                "learning rates (peak {}, floor {}) must satisfy 0 < floor <= peak",
                self.lr_peak, self.lr_floor
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid("Adam betas must lie in [0, 1)"));
        }
        if !(self.adam_eps > 0.0) || !(self.clip_norm > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::invalid(
                "adam_eps and clip_norm must be positive, weight_decay nonnegative",
            ));
        }
        Ok(())
    }
}

/// Parses the flat `key = value` config format: one assignment per line,
/// `#` starts a comment, unknown keys and malformed values are reported
/// with their line number. Missing keys keep their defaults.
pub fn parse_config(text: &str) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    let mut perc_mode: Option<String> = None;
    let mut perc_res: usize = crate::loss::PERCEPTUAL_RESOLUTION;

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let bare = raw.split('#').next().unwrap_or("").trim();
        if bare.is_empty() {
            continue;
        }
        let fail = |msg: String| Error::Config { line, msg };
        let (key, value) = bare
            .split_once('=')
            .ok_or_else(|| fail("expected key = value".into()))?;
        let (key, value) = (key.trim(), value.trim());
        if value.is_empty() {
            return Err(fail(format!("key '{key}' has no value")));
        }

        macro_rules! set {
            ($field:expr, $ty:ty) => {
                $field = value
                    .parse::<$ty>()
                    .map_err(|e| fail(format!("key '{key}': {e}")))?
            };
        }
        match key {
            "image_size" => set!(cfg.model.image_size, usize),
            "patch" => set!(cfg.model.patch, usize),
            "n_views" => set!(cfg.model.n_views, usize),
            "c_model" => set!(cfg.model.c_model, usize),
            "e_inner" => set!(cfg.model.e_inner, usize),
            "n_blocks" => set!(cfg.model.n_blocks, usize),
            "n_state" => set!(cfg.model.n_state, usize),
            "dt_rank" => set!(cfg.model.dt_rank, usize),
            "n_bins" => set!(cfg.model.n_bins, usize),
            "disk" => set!(cfg.model.disk, bool),
            "straight_through" => set!(cfg.model.straight_through, bool),
            "s_base" => set!(cfg.model.s_base, f64),
            "s_max" => set!(cfg.model.s_max, f64),
            "steps" => set!(cfg.steps, usize),
            "batch_size" => set!(cfg.batch_size, usize),
            "n_novel" => set!(cfg.n_novel, usize),
            "k_gaussians" => set!(cfg.k_gaussians, usize),
            "n_scenes" => set!(cfg.n_scenes, usize),
            "lr_peak" => set!(cfg.lr_peak, f64),
            "lr_floor" => set!(cfg.lr_floor, f64),
            "warmup_steps" => set!(cfg.warmup_steps, usize),
            "weight_decay" => set!(cfg.weight_decay, f64),
            "beta1" => set!(cfg.beta1, f64),
            "beta2" => set!(cfg.beta2, f64),
            "adam_eps" => set!(cfg.adam_eps, f64),
            "clip_norm" => set!(cfg.clip_norm, f64),
            "weight_mask" => set!(cfg.weights.mask, f64),
            "weight_perc" => set!(cfg.weights.perc, f64),
            "weight_reg" => set!(cfg.weights.reg, f64),
            "perceptual" => perc_mode = Some(value.to_string()),
            "perceptual_resolution" => set!(perc_res, usize),
            "augment_prob" => set!(cfg.augment_prob, f64),
            "distortion_strength" => set!(cfg.distortion_strength, f64),
            "jitter_magnitude" => set!(cfg.jitter_magnitude, f64),
            "checkpoint_every" => set!(cfg.checkpoint_every, usize),
            "eval_every" => set!(cfg.eval_every, usize),
            "seed" => set!(cfg.seed, u64),
            other => return Err(fail(format!("unknown key '{other}'"))),
        }
    }
    if let Some(mode) = perc_mode {
        cfg.perceptual = match mode.parse::<Perceptual>()? {
            Perceptual::Off => Perceptual::Off,
            Perceptual::RandomFeatures { .. } => Perceptual::RandomFeatures {
                resolution: perc_res,
            },
        };
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Random connected blob of Gaussians inside [-0.6, 0.6]^3: each center
/// after the first lands within twice its anchor's mean scale.
pub fn generate_scene<T: Real>(seed: u64, k_gaussians: usize) -> Result<GaussianSet<T>> {
    if k_gaussians == 0 {
        return Err(Error::invalid("a scene needs at least one Gaussian"));
    }
    let s = Stream::new(seed, "scene");
    let mut centers: Vec<[f64; 3]> = Vec::with_capacity(k_gaussians);
    let mut scales: Vec<[f64; 3]> = Vec::with_capacity(k_gaussians);
    let mut colors = Vec::with_capacity(k_gaussians * 3);
    let mut opacity = Vec::with_capacity(k_gaussians);
    let mut rot = Vec::with_capacity(k_gaussians * 4);

    for i in 0..k_gaussians {
        let g = s.substream(i as u64);
        let scale = [
            g.uniform_in(0, 0.04, 0.12),
            g.uniform_in(1, 0.04, 0.12),
            g.uniform_in(2, 0.04, 0.12),
        ];
        let center = if i == 0 {
            [
                g.uniform_in(3, -0.3, 0.3),
                g.uniform_in(4, -0.3, 0.3),
                g.uniform_in(5, -0.3, 0.3),
            ]
        } else {
            let anchor = (g.u64_at(6) % i as u64) as usize;
            let reach = 2.0 * scales[anchor].iter().sum::<f64>() / 3.0;
            let dir = Vec3::new(g.normal_at(7), g.normal_at(8), g.normal_at(9));
            let dir = if dir.norm() > 1e-9 {
                dir.normalized()
            } else {
                Vec3::new(0.0, 0.0, 1.0)
            };
            let r = g.uniform_in(10, 0.25, 1.0) * reach;
            let a = centers[anchor];
            // clamping into the convex box only shrinks the anchor distance
            [
                (a[0] + dir.x * r).clamp(-0.6, 0.6),
                (a[1] + dir.y * r).clamp(-0.6, 0.6),
                (a[2] + dir.z * r).clamp(-0.6, 0.6),
            ]
        };
        centers.push(center);
        scales.push(scale);
        for c in 0..3 {
            colors.push(T::from_f64(g.uniform_at(11 + c as u64)));
        }
        opacity.push(T::from_f64(g.uniform_in(14, 0.7, 1.0 - 1e-6)));
        let q = [
            g.normal_at(15),
            g.normal_at(16),
            g.normal_at(17),
            g.normal_at(18),
        ];
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 1e-9 {
            rot.extend(q.iter().map(|v| T::from_f64(v / n)));
        } else {
            rot.extend([1.0, 0.0, 0.0, 0.0].iter().map(|&v| T::from_f64(v)));
        }
    }
    let set = GaussianSet {
        mu: Tensor::from_vec(
            vec![k_gaussians, 3],
            centers
                .iter()
                .flatten()
                .map(|&v| T::from_f64(v))
                .collect(),
        ),
        scale: Tensor::from_vec(
            vec![k_gaussians, 3],
            scales.iter().flatten().map(|&v| T::from_f64(v)).collect(),
        ),
        color: Tensor::from_vec(vec![k_gaussians, 3], colors),
        opacity: Tensor::from_vec(vec![k_gaussians, 1], opacity),
        rot: Tensor::from_vec(vec![k_gaussians, 4], rot),
        disk: false,
    };
    set.validate()?;
    Ok(set)
}

/// One scene with freshly drawn cameras and clean rendered ground truth:
/// `cameras`/`targets` hold the input views first, then the novel views.
pub struct SceneSample<T: Real> {
    pub gt: GaussianSet<T>,
    pub input_cameras: Vec<CameraView>,
    /// [H, W, 3] images in [0, 1], composited over white.
    pub input_images: Vec<Tensor<T>>,
    pub cameras: Vec<CameraView>,
    pub targets: Vec<ViewTarget<T>>,
}

pub fn sample_scene_views<T: Real>(
    gt: &GaussianSet<T>,
    camera_seed: u64,
    image_size: usize,
    n_input: usize,
    n_novel: usize,
) -> Result<SceneSample<T>> {
    let poses = sample_orbit_cameras(camera_seed, n_input, n_novel, image_size, DEFAULT_FOV_Y_DEG);
    let mut cameras = poses.input.clone();
    cameras.extend(poses.novel.iter().cloned());

    let rendered = par::map_indexed(cameras.len(), |i| render_reference(gt, &cameras[i], WHITE));
    let mut targets = Vec::with_capacity(cameras.len());
    let mut input_images = Vec::with_capacity(n_input);
    for (i, r) in rendered.into_iter().enumerate() {
        let out = r?;
        if i < n_input {
            let clamped = out
                .rgb
                .map(|v| T::from_f64(v.to_f64().clamp(0.0, 1.0)))
                .reshaped(vec![image_size, image_size, 3])?;
            input_images.push(clamped);
        }
        targets.push(ViewTarget {
            height: out.height,
            width: out.width,
            rgb: out.rgb,
            alpha: out.alpha,
        });
    }
    Ok(SceneSample {
        gt: gt.clone(),
        input_cameras: poses.input,
        input_images,
        cameras,
        targets,
    })
}

/// The displacement (dy, dx) in pixels that `grid_distortion` samples
/// through at each output pixel: bilinear interpolation of a jittered
/// 8x8 control grid whose offsets are capped at strength * 4 px.
pub fn distortion_field(
    height: usize,
    width: usize,
    strength: f64,
    stream: &Stream,
) -> Vec<(f64, f64)> {
    let cap = strength * DISTORT_CAP_PX;
    let n = DISTORT_GRID;
    let node = |i: usize, j: usize, c: u64| -> f64 {
        stream.uniform_in(((i * n + j) as u64) * 2 + c, -cap, cap)
    };
    let to_grid = |p: usize, len: usize| -> f64 {
        if len > 1 {
            p as f64 * (n - 1) as f64 / (len - 1) as f64
        } else {
            0.0
        }
    };
    let mut field = Vec::with_capacity(height * width);
    for r in 0..height {
        let gy = to_grid(r, height);
        let i0 = (gy.floor() as usize).min(n - 2);
        let fy = gy - i0 as f64;
        for c in 0..width {
            let gx = to_grid(c, width);
            let j0 = (gx.floor() as usize).min(n - 2);
            let fx = gx - j0 as f64;
            let lerp2 = |ch: u64| -> f64 {
                let a = node(i0, j0, ch) * (1.0 - fx) + node(i0, j0 + 1, ch) * fx;
                let b = node(i0 + 1, j0, ch) * (1.0 - fx) + node(i0 + 1, j0 + 1, ch) * fx;
                a * (1.0 - fy) + b * fy
            };
            field.push((lerp2(0), lerp2(1)));
        }
    }
    field
}

/// Smooth warp of an [H, W, C] image by a coarse random control grid;
/// strength 0 is a bitwise identity.
pub fn grid_distortion<T: Real>(
    image: &Tensor<T>,
    strength: f64,
    stream: &Stream,
) -> Result<Tensor<T>> {
    if !(0.0..=1.0).contains(&strength) {
        return Err(Error::invalid(format!(
            "distortion strength {strength} is outside [0, 1]"
        )));
    }
    let shape = image.shape();
    if shape.len() != 3 {
        return Err(Error::shape(format!(
            "distortion expects [H, W, C], got {shape:?}"
        )));
    }
    let (h, w, ch) = (shape[0], shape[1], shape[2]);
    let field = distortion_field(h, w, strength, stream);
    let src = image.data();
    let mut out = Vec::with_capacity(src.len());
    for r in 0..h {
        for c in 0..w {
            let (dy, dx) = field[r * w + c];
            let sy = (r as f64 + dy).clamp(0.0, (h - 1) as f64);
            let sx = (c as f64 + dx).clamp(0.0, (w - 1) as f64);
            let y0 = (sy.floor() as usize).min(h - 1);
            let x0 = (sx.floor() as usize).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            let x1 = (x0 + 1).min(w - 1);
            let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
            for k in 0..ch {
                let at = |y: usize, x: usize| src[(y * w + x) * ch + k].to_f64();
                let v = at(y0, x0) * (1.0 - fy) * (1.0 - fx)
                    + at(y0, x1) * (1.0 - fy) * fx
                    + at(y1, x0) * fy * (1.0 - fx)
                    + at(y1, x1) * fy * fx;
                out.push(T::from_f64(v));
            }
        }
    }
    Ok(Tensor::from_vec(shape.to_vec(), out))
}

fn axis_angle(axis: Vec3, angle: f64) -> Mat3 {
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    let (x, y, z) = (axis.x, axis.y, axis.z);
    [
        [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
        [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
        [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
    ]
}

fn orthonormalize_columns(m: &Mat3) -> Mat3 {
    let col = |j: usize| Vec3::new(m[0][j], m[1][j], m[2][j]);
    let x = col(0).normalized();
    let y_raw = col(1);
    let y = (y_raw - x * y_raw.dot(x)).normalized();
    let z = x.cross(y);
    [[x.x, y.x, z.x], [x.y, y.y, z.y], [x.z, y.z, z.z]]
}

/// Pose noise: a rotation of at most magnitude * 5 degrees about a random
/// axis and a translation of at most magnitude * 0.05 units, followed by
/// re-orthonormalization. Magnitude 0 returns the pose unchanged.
pub fn camera_jitter(
    view: &CameraView,
    magnitude: f64,
    stream: &Stream,
) -> Result<CameraView> {
    if !(0.0..=1.0).contains(&magnitude) {
        return Err(Error::invalid(format!(
            "jitter magnitude {magnitude} is outside [0, 1]"
        )));
    }
    if magnitude == 0.0 {
        return Ok(view.clone());
    }
    let angle = stream.uniform_in(0, 0.0, magnitude * JITTER_CAP_DEG.to_radians());
    let raw = Vec3::new(stream.normal_at(1), stream.normal_at(2), stream.normal_at(3));
    let axis = if raw.norm() > 1e-9 {
        raw.normalized()
    } else {
        Vec3::new(0.0, 0.0, 1.0)
    };
    let rotation = orthonormalize_columns(&mat_mul(&axis_angle(axis, angle), &view.rotation));

    let shift_raw = Vec3::new(stream.normal_at(4), stream.normal_at(5), stream.normal_at(6));
    let shift_dir = if shift_raw.norm() > 1e-9 {
        shift_raw.normalized()
    } else {
        Vec3::new(1.0, 0.0, 0.0)
    };
    let shift = shift_dir * stream.uniform_in(7, 0.0, magnitude * JITTER_CAP_SHIFT);
    let mut out = view.clone();
    out.rotation = rotation;
    out.origin = view.origin + shift;
    Ok(out)
}

fn white_background<'t, T: Real>() -> Var<'t, T> {
    Var::constant(Tensor::from_vec(
        vec![3],
        WHITE.iter().map(|&v| T::from_f64(v)).collect(),
    ))
}

struct PreparedItem<T: Real> {
    sample: SceneSample<T>,
    net_images: Vec<Tensor<T>>,
    net_cameras: Vec<CameraView>,
    noise: Tensor<T>,
}

/// Builds one batch item for an absolute step: fresh cameras and targets,
/// then input-only augmentations. The supervision targets come from the
/// clean cameras regardless of augmentation.
fn prepare_item<T: Real>(
    cfg: &TrainConfig,
    scenes: &[GaussianSet<T>],
    step: usize,
    b: usize,
) -> Result<PreparedItem<T>> {
    let scene_idx = (step * cfg.batch_size + b) % scenes.len();
    let st = Stream::new(cfg.seed, "step")
        .substream(step as u64)
        .substream(b as u64);
    let sample = sample_scene_views(
        &scenes[scene_idx],
        st.u64_at(0),
        cfg.model.image_size,
        cfg.model.n_views,
        cfg.n_novel,
    )?;
    let mut net_images = sample.input_images.clone();
    let mut net_cameras = sample.input_cameras.clone();
    for v in 0..cfg.model.n_views {
        if st.substream(1).uniform_at(v as u64) < cfg.augment_prob {
            net_images[v] = grid_distortion(
                &net_images[v],
                cfg.distortion_strength,
                &st.substream(2).substream(v as u64),
            )?;
        }
        if st.substream(3).uniform_at(v as u64) < cfg.augment_prob {
            net_cameras[v] = camera_jitter(
                &net_cameras[v],
                cfg.jitter_magnitude,
                &st.substream(4).substream(v as u64),
            )?;
        }
    }
    let noise = gumbel_noise(&st.substream(5), cfg.model.seq_len());
    Ok(PreparedItem {
        sample,
        net_images,
        net_cameras,
        noise,
    })
}

/// A diverged loss must abort before gradients flow anywhere; the caller
/// keeps the last written checkpoint untouched.
fn ensure_finite_loss(report: &LossReport, step: usize) -> Result<()> {
    if !report.total.is_finite() {
        return Err(Error::NonFinite(format!("training loss at step {step}")));
    }
    Ok(())
}

struct ItemOut {
    grads: Vec<Vec<f32>>,
    report: LossReport,
}

fn run_item(
    cfg: &TrainConfig,
    store: &ParamStore<f32>,
    scenes: &[GaussianSet<f32>],
    step: usize,
    b: usize,
    tau: f64,
) -> Result<ItemOut> {
    let prep = prepare_item(cfg, scenes, step, b)?;
    let tape = Tape::new();
    let bound = store.bind(&tape);
    let g = forward(
        &bound.model,
        &cfg.model,
        &prep.net_images,
        &prep.net_cameras,
        RotMode::Train {
            tau,
            noise: &prep.noise,
        },
    )?;
    let bg = white_background();
    let renders = render_views(&g, &prep.sample.cameras, &bg)?;
    let (loss, report) = composite_loss(
        &renders,
        &prep.sample.targets,
        &g.opacity,
        &cfg.weights,
        cfg.perceptual,
    )?;
    ensure_finite_loss(&report, step)?;
    tape.backward(&loss)?;
    let grads = bound
        .vars
        .iter()
        .zip(store.param_lens())
        .map(|(v, len)| tape.grad(v).unwrap_or_else(|| vec![0.0; len]))
        .collect();
    Ok(ItemOut { grads, report })
}

#[derive(Clone, Copy)]
struct StepStats {
    total: f64,
    rgb: f64,
    mask: f64,
    perc: f64,
    reg: f64,
}

fn average_reports(reports: &[LossReport]) -> StepStats {
    let n = reports.len() as f64;
    let mean = |f: fn(&LossReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    StepStats {
        total: mean(|r| r.total),
        rgb: mean(|r| r.rgb_mse),
        mask: mean(|r| r.mask_mse),
        perc: mean(|r| r.perceptual),
        reg: mean(|r| r.opacity_reg),
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub steps_run: usize,
    pub final_loss: f64,
    /// Novel-view PSNR on the held-out scene at the last evaluation.
    pub eval_psnr: f64,
}

const METRICS_HEADER: &str = "step,lr,loss,rgb,mask,perc,reg,grad_norm,psnr\n";

/// Runs (or resumes) the loop: per absolute step, a freshly sampled batch,
/// input-only augmentations, batch-parallel forward/backward on separate
/// tapes, a fixed-order gradient reduction, clipping, one AdamW step, and
/// periodic held-out evaluation plus atomically replaced checkpoints. A
/// non-finite loss or gradient aborts while the last written checkpoint
/// stays on disk. `limit` bounds how many steps this invocation runs.
pub fn train(
    cfg: &TrainConfig,
    out_dir: &Path,
    resume: Option<&Path>,
    limit: Option<usize>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let ckpt_path = out_dir.join("checkpoint.ckpt");
    let metrics_path = out_dir.join("metrics.csv");

    let adam_cfg = AdamWConfig {
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        eps: cfg.adam_eps,
        weight_decay: cfg.weight_decay,
    };
    let (mut store, mut opt, start_step) = match resume {
        Some(path) => {
            let ck = load_checkpoint::<f32>(path)?;
            if ck.params.config != cfg.model {
                return Err(Error::invalid(
                    "checkpoint architecture does not match the training config",
                ));
            }
            let opt = match &ck.opt {
                Some(state) => restore_optimizer(adam_cfg, &ck.params, state),
                None => AdamW::new(adam_cfg, &ck.params.param_lens()),
            };
            (ck.params, opt, ck.step as usize)
        }
        None => {
            let store = ParamStore::init(cfg.model, cfg.seed)?;
            let opt = AdamW::new(adam_cfg, &store.param_lens());
            (store, opt, 0)
        }
    };
    if start_step >= cfg.steps {
        return Err(Error::invalid(format!(
            "checkpoint is already at step {start_step} of {}",
            cfg.steps
        )));
    }
    let end_step = limit
        .map(|l| cfg.steps.min(start_step + l))
        .unwrap_or(cfg.steps);

    let scene_seeds = Stream::new(cfg.seed, "scenes");
    let scenes: Vec<GaussianSet<f32>> = (0..cfg.n_scenes)
        .map(|i| generate_scene(scene_seeds.u64_at(i as u64), cfg.k_gaussians))
        .collect::<Result<_>>()?;
    let eval_scene = generate_scene(Stream::new(cfg.seed, "eval-scene").u64_at(0), cfg.k_gaussians)?;
    let eval_sample = sample_scene_views(
        &eval_scene,
        Stream::new(cfg.seed, "eval-views").u64_at(0),
        cfg.model.image_size,
        cfg.model.n_views,
        cfg.n_novel.max(1),
    )?;

    let mut metrics = if start_step > 0 && metrics_path.exists() {
        OpenOptions::new().append(true).open(&metrics_path)?
    } else {
        let mut f = File::create(&metrics_path)?;
        f.write_all(METRICS_HEADER.as_bytes())?;
        f
    };

    let mut last_psnr = f64::NAN;
    let mut final_loss = f64::NAN;
    let lens = store.param_lens();
    for step in start_step..end_step {
        let lr = lr_at(step, cfg.steps, cfg.warmup_steps, cfg.lr_peak, cfg.lr_floor);
        let tau = temperature_at(step, cfg.steps);

        let items = par::map_indexed(cfg.batch_size, |b| {
            run_item(cfg, &store, &scenes, step, b, tau)
        });
        let mut grads: Vec<Vec<f32>> = lens.iter().map(|&n| vec![0.0; n]).collect();
        let mut reports = Vec::with_capacity(cfg.batch_size);
        for item in items {
            let it = item?;
            for (acc, g) in grads.iter_mut().zip(&it.grads) {
                for (a, v) in acc.iter_mut().zip(g) {
                    *a += *v;
                }
            }
            reports.push(it.report);
        }
        let inv_batch = 1.0 / cfg.batch_size as f32;
        for g in &mut grads {
            for v in g.iter_mut() {
                *v *= inv_batch;
            }
        }
        let mut clip_refs: Vec<&mut [f32]> = grads.iter_mut().map(|g| g.as_mut_slice()).collect();
        let grad_norm = clip_grad_norm(&mut clip_refs, cfg.clip_norm);
        let grad_refs: Vec<&[f32]> = grads.iter().map(|g| g.as_slice()).collect();
        store.optimizer_step(&mut opt, lr, &grad_refs)?;

        let stats = average_reports(&reports);
        final_loss = stats.total;
        let evaled = (step + 1) % cfg.eval_every == 0 || step + 1 == end_step;
        let psnr_col = if evaled {
            let m = evaluate(&store, std::slice::from_ref(&eval_sample))?;
            last_psnr = m.psnr;
            eprintln!(
                "step {:>6}/{} loss {:.5} psnr {:.2} lr {:.3e}",
                step + 1,
                cfg.steps,
                stats.total,
                m.psnr,
                lr
            );
            format!("{:.4}", m.psnr)
        } else {
            String::new()
        };
        let row = format!(
            "{},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{}\n",
            step, lr, stats.total, stats.rgb, stats.mask, stats.perc, stats.reg, grad_norm, psnr_col
        );
        metrics.write_all(row.as_bytes())?;

        if (step + 1) % cfg.checkpoint_every == 0 || step + 1 == end_step {
            let tmp = out_dir.join("checkpoint.ckpt.tmp");
            save_checkpoint(&tmp, &store, (step + 1) as u64, Some(&opt))?;
            std::fs::rename(&tmp, &ckpt_path)?;
        }
    }
    metrics.flush()?;
    Ok(TrainOutcome {
        checkpoint: ckpt_path,
        metrics: metrics_path,
        steps_run: end_step - start_step,
        final_loss,
        eval_psnr: last_psnr,
    })
}

/// Peak signal-to-noise ratio in dB for unit-range images, capped at 99.
pub fn psnr<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "psnr over {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut se = 0.0;
    for (x, y) in a.data().iter().zip(b.data()) {
        let d = x.to_f64() - y.to_f64();
        se += d * d;
    }
    let mse = se / a.len() as f64;
    if mse <= 0.0 {
        return Ok(99.0);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(99.0))
}

const SSIM_WINDOW: usize = 11;

fn ssim_weights() -> [f64; SSIM_WINDOW * SSIM_WINDOW] {
    let sigma = 1.5;
    let mut w = [0.0; SSIM_WINDOW * SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for i in 0..SSIM_WINDOW {
        for j in 0..SSIM_WINDOW {
            let d2 = (i as f64 - c).powi(2) + (j as f64 - c).powi(2);
            let v = (-d2 / (2.0 * sigma * sigma)).exp();
            w[i * SSIM_WINDOW + j] = v;
            sum += v;
        }
    }
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// Mean structural similarity over all valid 11x11 Gaussian-weighted
/// windows and channels, with the standard unit-range constants.
pub fn ssim<T: Real>(a: &Tensor<T>, b: &Tensor<T>, height: usize, width: usize) -> Result<f64> {
    let channels = 3;
    if a.shape() != b.shape() || a.shape() != [height * width, channels] {
        return Err(Error::shape(format!(
            "ssim over {:?} vs {:?} at {height} x {width}",
            a.shape(),
            b.shape()
        )));
    }
    if height < SSIM_WINDOW || width < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "ssim needs at least {SSIM_WINDOW} x {SSIM_WINDOW} pixels"
        )));
    }
    let w = ssim_weights();
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let (xa, xb) = (a.data(), b.data());
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..channels {
        for r0 in 0..=(height - SSIM_WINDOW) {
            for c0 in 0..=(width - SSIM_WINDOW) {
                let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..SSIM_WINDOW {
                    for j in 0..SSIM_WINDOW {
                        let wij = w[i * SSIM_WINDOW + j];
                        let p = ((r0 + i) * width + (c0 + j)) * channels + ch;
                        let (x, y) = (xa[p].to_f64(), xb[p].to_f64());
                        mx += wij * x;
                        my += wij * y;
                        sxx += wij * x * x;
                        syy += wij * y * y;
                        sxy += wij * x * y;
                    }
                }
                let (vx, vy, cxy) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
                total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2))
                    / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

#[derive(Clone, Copy, Debug)]
pub struct EvalMetrics {
    pub psnr: f64,
    pub ssim: f64,
}

/// Reconstructs each sample from its input views alone and scores the
/// novel-view renders against the clean ground truth.
pub fn evaluate<T: Real>(store: &ParamStore<T>, samples: &[SceneSample<T>]) -> Result<EvalMetrics> {
    if samples.is_empty() {
        return Err(Error::invalid("evaluation needs at least one sample"));
    }
    let mut p_sum = 0.0;
    let mut s_sum = 0.0;
    let mut count = 0usize;
    for sample in samples {
        let model = store.bind_constant();
        let g = forward(
            &model,
            &store.config,
            &sample.input_images,
            &sample.input_cameras,
            RotMode::Infer,
        )?;
        let set = g.snapshot();
        let n_input = sample.input_cameras.len();
        for (cam, target) in sample.cameras.iter().zip(&sample.targets).skip(n_input) {
            let out = render_tiled(&set, cam, WHITE, RENDER_TILE)?;
            p_sum += psnr(&out.rgb, &target.rgb)?;
            s_sum += ssim(&out.rgb, &target.rgb, target.height, target.width)?;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::invalid("evaluation needs at least one novel view"));
    }
    Ok(EvalMetrics {
        psnr: p_sum / count as f64,
        ssim: s_sum / count as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::orbit_ring;
    use approx::assert_relative_eq;

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            model: ModelConfig {
                image_size: 16,
                patch: 8,
                n_views: 2,
                c_model: 8,
                e_inner: 16,
                n_blocks: 1,
                n_state: 2,
                dt_rank: 2,
                n_bins: 4,
                disk: false,
                straight_through: true,
                s_base: 0.02,
                s_max: 0.3,
            },
            steps: 4,
            batch_size: 1,
            n_novel: 2,
            k_gaussians: 3,
            n_scenes: 1,
            warmup_steps: 1,
            checkpoint_every: 2,
            eval_every: 2,
            seed: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn scenes_are_deterministic_connected_and_bounded() {
        let a: GaussianSet<f64> = generate_scene(5, 24).unwrap();
        let b: GaussianSet<f64> = generate_scene(5, 24).unwrap();
        assert_eq!(a.mu.data(), b.mu.data());
        assert_eq!(a.rot.data(), b.rot.data());
        let c: GaussianSet<f64> = generate_scene(6, 24).unwrap();
        assert_ne!(a.mu.data(), c.mu.data());

        for v in a.mu.data() {
            assert!((-0.6..=0.6).contains(v), "center {v} escapes the box");
        }
        for v in a.opacity.data() {
            assert!((0.7..1.0).contains(v), "opacity {v} outside [0.7, 1)");
        }
        for i in 1..24 {
            let ci = &a.mu.data()[i * 3..i * 3 + 3];
            let connected = (0..i).any(|j| {
                let cj = &a.mu.data()[j * 3..j * 3 + 3];
                let sj = &a.scale.data()[j * 3..j * 3 + 3];
                let reach = 2.0 * sj.iter().sum::<f64>() / 3.0;
                let d2: f64 = ci.iter().zip(cj).map(|(x, y)| (x - y) * (x - y)).sum();
                d2.sqrt() <= reach + 1e-9
            });
            assert!(connected, "gaussian {i} is isolated");
        }
        assert!(generate_scene::<f64>(1, 0).is_err());
    }

    #[test]
    fn single_gaussian_scene_is_visible_from_every_orbit_camera() {
        let scene: GaussianSet<f64> = generate_scene(11, 1).unwrap();
        for cam in orbit_ring(8, 20.0, 32, DEFAULT_FOV_Y_DEG) {
            let out = render_reference(&scene, &cam, WHITE).unwrap();
            let coverage: f64 = out.alpha.data().iter().sum();
            assert!(coverage > 0.0, "camera sees an empty image");
        }
    }

    #[test]
    fn distortion_is_identity_at_zero_and_bounded() {
        let s = Stream::new(9, "distort-test");
        let img: Tensor<f64> = Tensor::from_vec(
            vec![24, 24, 3],
            (0..24 * 24 * 3).map(|i| s.uniform_at(i as u64)).collect(),
        );
        let same = grid_distortion(&img, 0.0, &s.substream(1)).unwrap();
        assert_eq!(same.data(), img.data(), "zero strength must be bitwise");

        let warped = grid_distortion(&img, 1.0, &s.substream(2)).unwrap();
        assert_eq!(warped.shape(), img.shape());
        for v in warped.data() {
            assert!((0.0..=1.0).contains(v));
        }
        let field = distortion_field(24, 24, 1.0, &s.substream(2));
        let mut mean_norm = 0.0;
        for &(dy, dx) in &field {
            assert!(dy.abs() <= DISTORT_CAP_PX + 1e-9);
            assert!(dx.abs() <= DISTORT_CAP_PX + 1e-9);
            mean_norm += (dy * dy + dx * dx).sqrt();
        }
        mean_norm /= field.len() as f64;
        assert!(mean_norm <= DISTORT_CAP_PX * std::f64::consts::SQRT_2);
        assert!(mean_norm > 0.1, "a full-strength warp should move pixels");

        assert!(grid_distortion(&img, 1.5, &s).is_err());
        let flat: Tensor<f64> = Tensor::zeros(vec![4, 4]);
        assert!(grid_distortion(&flat, 0.5, &s).is_err());
    }

    #[test]
    fn jitter_preserves_rigidity_within_caps() {
        let cam = orbit_ring(1, 15.0, 32, DEFAULT_FOV_Y_DEG).remove(0);
        let s = Stream::new(21, "jitter-test");
        let same = camera_jitter(&cam, 0.0, &s).unwrap();
        assert_eq!(same.rotation, cam.rotation);
        assert_eq!(
            (same.origin.x, same.origin.y, same.origin.z),
            (cam.origin.x, cam.origin.y, cam.origin.z)
        );

        for probe in 0..20u64 {
            let j = camera_jitter(&cam, 1.0, &s.substream(probe)).unwrap();
            let r = &j.rotation;
            for a in 0..3 {
                for b in 0..3 {
                    let dot: f64 = (0..3).map(|k| r[k][a] * r[k][b]).sum();
                    let want = if a == b { 1.0 } else { 0.0 };
                    assert!((dot - want).abs() < 1e-12, "columns not orthonormal");
                }
            }
            let fwd = |m: &Mat3| Vec3::new(-m[0][2], -m[1][2], -m[2][2]);
            let cos = fwd(&cam.rotation).dot(fwd(&j.rotation)).clamp(-1.0, 1.0);
            let angle_deg = cos.acos().to_degrees();
            assert!(angle_deg <= JITTER_CAP_DEG + 0.1, "rotation {angle_deg} over cap");
            let shift = (j.origin - cam.origin).norm();
            assert!(shift <= JITTER_CAP_SHIFT + 1e-9, "shift {shift} over cap");
        }
        assert!(camera_jitter(&cam, 2.0, &s).is_err());
    }

    #[test]
    fn psnr_and_ssim_match_closed_forms() {
        let s = Stream::new(33, "metric-test");
        let img: Tensor<f64> = Tensor::from_vec(
            vec![16 * 16, 3],
            (0..16 * 16 * 3).map(|i| s.uniform_at(i as u64)).collect(),
        );
        assert_eq!(psnr(&img, &img).unwrap(), 99.0);
        assert_relative_eq!(ssim(&img, &img, 16, 16).unwrap(), 1.0, epsilon = 1e-9);

        let off = img.map(|v| v + 0.1);
        assert_relative_eq!(psnr(&img, &off).unwrap(), 20.0, epsilon = 1e-9);

        let other: Tensor<f64> = Tensor::from_vec(
            vec![16 * 16, 3],
            (0..16 * 16 * 3)
                .map(|i| s.uniform_at(9000 + i as u64))
                .collect(),
        );
        let ab = ssim(&img, &other, 16, 16).unwrap();
        let ba = ssim(&other, &img, 16, 16).unwrap();
        assert_relative_eq!(ab, ba, epsilon = 1e-12);
        assert!(ab < 1.0);

        let short: Tensor<f64> = Tensor::zeros(vec![4, 3]);
        assert!(psnr(&img, &short).is_err());
        assert!(ssim(&img, &short, 16, 16).is_err());
        assert!(ssim(&short, &short, 2, 2).is_err());
    }

    #[test]
    fn config_parser_applies_keys_and_reports_line_numbers() {
        let cfg = parse_config(
            "# training setup\n\
             image_size = 32\n\
             patch = 8\n\
             steps = 50   # short run\n\
             lr_peak = 2e-3\n\
             weight_perc = 0.25\n\
             perceptual = random-features\n\
             perceptual_resolution = 64\n\
             augment_prob = 0.5\n\
             seed = 17\n",
        )
        .unwrap();
        assert_eq!(cfg.model.image_size, 32);
        assert_eq!(cfg.steps, 50);
        assert_eq!(cfg.lr_peak, 2e-3);
        assert_eq!(cfg.weights.perc, 0.25);
        assert_eq!(cfg.perceptual, Perceptual::RandomFeatures { resolution: 64 });
        assert_eq!(cfg.augment_prob, 0.5);
        assert_eq!(cfg.seed, 17);

        let defaults = parse_config("").unwrap();
        assert_eq!(defaults.steps, TrainConfig::default().steps);

        let line_of = |text: &str| -> usize {
            match parse_config(text) {
                Err(Error::Config { line, .. }) => line,
                other => panic!("expected a config error, got {other:?}"),
            }
        };
        assert_eq!(line_of("steps = 10\nbogus_key = 1\n"), 2);
        assert_eq!(line_of("steps = ten\n"), 1);
        assert_eq!(line_of("\n\nsteps\n"), 3);
        assert_eq!(line_of("steps =\n"), 1);

        // a parseable file can still describe an invalid model
        assert!(parse_config("patch = 7\n").is_err());
        assert!(parse_config("augment_prob = 1.5\n").is_err());
    }

    #[test]
    fn supervision_targets_ignore_augmentation() {
        let cfg_aug = TrainConfig {
            augment_prob: 1.0,
            ..tiny_config()
        };
        let cfg_clean = TrainConfig {
            augment_prob: 0.0,
            ..tiny_config()
        };
        let scenes: Vec<GaussianSet<f32>> =
            vec![generate_scene(Stream::new(3, "scenes").u64_at(0), 3).unwrap()];
        let aug = prepare_item(&cfg_aug, &scenes, 0, 0).unwrap();
        let clean = prepare_item(&cfg_clean, &scenes, 0, 0).unwrap();

        for (a, c) in aug.sample.targets.iter().zip(&clean.sample.targets) {
            assert_eq!(a.rgb.data(), c.rgb.data(), "targets must stay clean");
            assert_eq!(a.alpha.data(), c.alpha.data());
        }
        let images_differ = aug
            .net_images
            .iter()
            .zip(&clean.net_images)
            .any(|(a, c)| a.data() != c.data());
        let cameras_differ = aug
            .net_cameras
            .iter()
            .zip(&clean.net_cameras)
            .any(|(a, c)| a.rotation != c.rotation);
        assert!(
            images_differ && cameras_differ,
            "full-probability augmentation must perturb the inputs"
        );
    }

    #[test]
    fn micro_training_runs_resumes_and_reproduces() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config();

        let full = train(&cfg, &dir.path().join("full"), None, None).unwrap();
        assert_eq!(full.steps_run, 4);
        assert!(full.final_loss.is_finite());
        assert!(full.eval_psnr.is_finite());

        // bitwise repeatability of the whole metrics file
        let again = train(&cfg, &dir.path().join("again"), None, None).unwrap();
        let bytes_full = std::fs::read(&full.metrics).unwrap();
        let bytes_again = std::fs::read(&again.metrics).unwrap();
        assert_eq!(bytes_full, bytes_again, "metrics must reproduce bitwise");

        // stop at step 2, resume to the end; the stitched run matches
        let split_dir = dir.path().join("split");
        let part = train(&cfg, &split_dir, None, Some(2)).unwrap();
        assert_eq!(part.steps_run, 2);
        let rest = train(&cfg, &split_dir, Some(&part.checkpoint), None).unwrap();
        assert_eq!(rest.steps_run, 2);
        let bytes_split = std::fs::read(&rest.metrics).unwrap();
        assert_eq!(
            bytes_full, bytes_split,
            "resumed metrics must match the uninterrupted run"
        );
        let ck_full = load_checkpoint::<f32>(&full.checkpoint).unwrap();
        let ck_split = load_checkpoint::<f32>(&rest.checkpoint).unwrap();
        assert_eq!(ck_full.step, 4);
        assert_eq!(ck_split.step, 4);
        for (a, b) in ck_full
            .params
            .tensors()
            .iter()
            .zip(ck_split.params.tensors())
        {
            assert_eq!(a.data(), b.data(), "resumed weights must match bitwise");
        }
    }

    #[test]
    fn a_diverged_loss_aborts_with_a_named_step() {
        let h = 4;
        let target = ViewTarget {
            height: h,
            width: h,
            rgb: Tensor::<f64>::full(vec![h * h, 3], 0.5),
            alpha: Tensor::full(vec![h * h, 1], 1.0),
        };
        let mut bad = vec![0.25; h * h * 4];
        bad[0] = f64::NAN;
        let render = Var::constant(Tensor::from_vec(vec![h * h, 4], bad));
        let opacity = Var::constant(Tensor::full(vec![2, 1], 0.5));
        let (_, report) = composite_loss(
            &[render],
            std::slice::from_ref(&target),
            &opacity,
            &LossWeights::default(),
            Perceptual::Off,
        )
        .unwrap();
        assert!(!report.total.is_finite());

        let msg = format!("{}", ensure_finite_loss(&report, 7).unwrap_err());
        assert!(
            msg.contains("non-finite") && msg.contains("step 7"),
            "expected a non-finite loss abort, got: {msg}"
        );
        let fine = LossReport { total: 1.0, ..report };
        assert!(ensure_finite_loss(&fine, 0).is_ok());
    }

    #[test]
    fn exploding_run_aborts_but_keeps_the_last_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            lr_peak: 1e20,
            lr_floor: 1e19,
            warmup_steps: 0,
            steps: 6,
            checkpoint_every: 1,
            eval_every: 100,
            ..tiny_config()
        };
        train(&cfg, dir.path(), None, None).unwrap_err();
        let ck = load_checkpoint::<f32>(&dir.path().join("checkpoint.ckpt")).unwrap();
        assert!(ck.step >= 1, "at least one good step must be retained");
        assert!(ck.params.tensors().iter().all(|t| t.all_finite()));
    }

    #[test]
    fn evaluation_reports_finite_scores_for_a_fresh_model() {
        let cfg = tiny_config();
        let store: ParamStore<f32> = ParamStore::init(cfg.model, 1).unwrap();
        let scene: GaussianSet<f32> = generate_scene(2, 3).unwrap();
        let sample = sample_scene_views(&scene, 7, 16, 2, 2).unwrap();
        let m = evaluate(&store, &[sample]).unwrap();
        assert!(m.psnr.is_finite() && m.psnr > 0.0 && m.psnr <= 99.0);
        assert!(m.ssim.is_finite() && m.ssim <= 1.0);
        assert!(evaluate::<f32>(&store, &[]).is_err());
    }
}
