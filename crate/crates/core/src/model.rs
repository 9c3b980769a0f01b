//! Assembles the full reconstructor: a named parameter store with
//! deterministic initialization, the posed-images-to-Gaussians forward pass,
//! per-view rendering, and checkpoint round-tripping.
//!
//! Every learnable tensor has a stable slash-separated name; the checkpoint
//! file stores those names verbatim (prefixed "param/"), alongside optional
//! optimizer moments ("opt/m/...", "opt/v/...", "opt/t") and "meta/..."
//! entries carrying the configuration and the training step.

use std::path::Path;

use crate::autodiff::{
    read_tensors, write_tensors, AdamW, AdamWConfig, NamedTensor, Tape, Var,
};
use crate::decoder::{decode_gaussians, DecoderVars, GaussianVars, RotMode, ROT_CLASSES};
use crate::error::{Error, Result};
use crate::geometry::{pluecker_rays, CameraView};
use crate::rng::Stream;
use crate::splat::render_images;
use crate::ssm::{reconstructor_forward, BlockVars};
use crate::tensor::{Real, Tensor};
use crate::tokenizer::{
    add_positional, cross_scan, fuse_view, patch_embed, FUSED_CHANNELS, SCAN_DIRECTIONS,
};

const CONV_KERNEL: usize = 4;
const MLP_EXPAND: usize = 4;

/// Fixed architecture hyperparameters; everything downstream (parameter
/// shapes, sequence length, Gaussian count) derives from these.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    /// Square input image side in pixels.
    pub image_size: usize,
    /// Patch side; must divide `image_size`.
    pub patch: usize,
    /// Number of posed input views.
    pub n_views: usize,
    /// Token width C.
    pub c_model: usize,
    /// Expanded state-space width E.
    pub e_inner: usize,
    pub n_blocks: usize,
    pub n_state: usize,
    pub dt_rank: usize,
    /// Bins per axis of the position head.
    pub n_bins: usize,
    /// Decode 2-scale oriented disks instead of 3-scale ellipsoids.
    pub disk: bool,
    /// Hard rotation samples with soft gradients during training.
    pub straight_through: bool,
    pub s_base: f64,
    pub s_max: f64,
}

impl ModelConfig {
    /// Minutes-scale CPU configuration: 64x64 inputs, 1024-token sequence.
    pub fn desk() -> Self {
        ModelConfig {
            image_size: 64,
            patch: 8,
            n_views: 4,
            c_model: 64,
            e_inner: 128,
            n_blocks: 2,
            n_state: 8,
            dt_rank: 4,
            n_bins: 32,
            disk: false,
            straight_through: true,
            s_base: 0.02,
            s_max: 0.3,
        }
    }

    /// Full-scale configuration (448x448, 16384-token sequence); used for
    /// shape and cost arithmetic, not desk training.
    pub fn paper() -> Self {
        ModelConfig {
            image_size: 448,
            patch: 14,
            n_views: 4,
            c_model: 512,
            e_inner: 1024,
            n_blocks: 14,
            n_state: 16,
            dt_rank: 32,
            n_bins: 128,
            disk: false,
            straight_through: true,
            s_base: 0.02,
            s_max: 0.3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.image_size % self.patch != 0 {
            return Err(Error::invalid(format!(
                "patch {} does not divide image size {}",
                self.patch, self.image_size
            )));
        }
        for (name, v) in [
            ("n_views", self.n_views),
            ("c_model", self.c_model),
            ("e_inner", self.e_inner),
            ("n_blocks", self.n_blocks),
            ("n_state", self.n_state),
            ("dt_rank", self.dt_rank),
            ("n_bins", self.n_bins),
        ] {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be at least 1")));
            }
        }
        if self.n_bins < 2 {
            return Err(Error::invalid("position head needs at least 2 bins"));
        }
        if !(self.s_base > 0.0 && self.s_max >= self.s_base) {
            return Err(Error::invalid(format!(
                "scale limits ({}, {}) must satisfy 0 < s_base <= s_max",
                self.s_base, self.s_max
            )));
        }
        Ok(())
    }

    /// Token-grid side per view.
    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch
    }

    pub fn tokens_per_view(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    /// Cross-scan sequence length 4 * N * h * w; one Gaussian per token.
    pub fn seq_len(&self) -> usize {
        SCAN_DIRECTIONS * self.n_views * self.tokens_per_view()
    }

    fn scale_cols(&self) -> usize {
        if self.disk {
            2
        } else {
            3
        }
    }
}

enum Init {
    Normal(f64),
    Zeros,
    Ones,
    /// a_log[e][n] = ln(n + 1): stable real-valued diagonal state matrix.
    StateDecay,
    /// softplus-inverse of a step size drawn log-uniformly in [1e-3, 1e-1].
    StepBias,
}

struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let (c, e) = (cfg.c_model, cfg.e_inner);
    let mut specs = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, init: Init| {
        specs.push(ParamSpec { name, shape, init })
    };
    let std = Init::Normal(0.02);

    push(
        "tokenizer/patch_kernel".into(),
        vec![cfg.patch * cfg.patch * FUSED_CHANNELS, c],
        Init::Normal(0.02),
    );
    push("tokenizer/patch_bias".into(), vec![c], Init::Zeros);
    push(
        "tokenizer/positional".into(),
        vec![cfg.seq_len(), c],
        Init::Normal(0.02),
    );
    for i in 0..cfg.n_blocks {
        let b = |field: &str| format!("blocks/{i}/{field}");
        push(b("norm_w"), vec![c], Init::Ones);
        push(b("in_proj"), vec![c, 2 * e], Init::Normal(0.02));
        push(b("conv_w"), vec![CONV_KERNEL, e], Init::Normal(0.02));
        push(b("conv_b"), vec![e], Init::Zeros);
        push(
            b("x_proj"),
            vec![e, cfg.dt_rank + 2 * cfg.n_state],
            Init::Normal(0.02),
        );
        push(b("dt_w"), vec![cfg.dt_rank, e], Init::Normal(0.02));
        push(b("dt_b"), vec![e], Init::StepBias);
        push(b("a_log"), vec![e, cfg.n_state], Init::StateDecay);
        push(b("d_skip"), vec![e], Init::Ones);
        push(b("out_proj"), vec![e, c], Init::Normal(0.02));
    }
    push("final_norm".into(), vec![c], Init::Ones);

    let h = MLP_EXPAND * c;
    push("decoder/mlp_w1".into(), vec![c, h], Init::Normal(0.02));
    push("decoder/mlp_b1".into(), vec![h], Init::Zeros);
    push("decoder/mlp_w2".into(), vec![h, c], Init::Normal(0.02));
    push("decoder/mlp_b2".into(), vec![c], Init::Zeros);
    push("decoder/pos_w".into(), vec![c, 3 * cfg.n_bins], std);
    push("decoder/pos_b".into(), vec![3 * cfg.n_bins], Init::Zeros);
    push("decoder/scale_w".into(), vec![c, cfg.scale_cols()], Init::Normal(0.02));
    push("decoder/scale_b".into(), vec![cfg.scale_cols()], Init::Zeros);
    push("decoder/opacity_w".into(), vec![c, 1], Init::Normal(0.02));
    push("decoder/opacity_b".into(), vec![1], Init::Zeros);
    push("decoder/color_w".into(), vec![c, 3], Init::Normal(0.02));
    push("decoder/color_b".into(), vec![3], Init::Zeros);
    push("decoder/rot_w".into(), vec![c, ROT_CLASSES], Init::Normal(0.02));
    push("decoder/rot_b".into(), vec![ROT_CLASSES], Init::Zeros);
    specs
}

fn init_tensor<T: Real>(spec: &ParamSpec, seed: u64, n_state: usize) -> Tensor<T> {
    let len: usize = spec.shape.iter().product();
    let s = Stream::new(seed, &format!("init/{}", spec.name));
    let data: Vec<T> = match spec.init {
        Init::Normal(std) => (0..len)
            .map(|i| T::from_f64(s.normal_at(i as u64) * std))
            .collect(),
        Init::Zeros => vec![T::ZERO; len],
        Init::Ones => vec![T::from_f64(1.0); len],
        Init::StateDecay => (0..len)
            .map(|i| T::from_f64(((i % n_state) as f64 + 1.0).ln()))
            .collect(),
        Init::StepBias => (0..len)
            .map(|i| {
                let dt = s.uniform_in(i as u64, (1e-3f64).ln(), (1e-1f64).ln()).exp();
                T::from_f64((dt.exp() - 1.0).ln())
            })
            .collect(),
    };
    Tensor::from_vec(spec.shape.clone(), data)
}

/// All learnable tensors of one model, in a fixed named order.
pub struct ParamStore<T: Real> {
    pub config: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let specs = param_specs(&config);
        let names = specs.iter().map(|s| s.name.clone()).collect();
        let tensors = specs
            .iter()
            .map(|s| init_tensor(s, seed, config.n_state))
            .collect();
        Ok(ParamStore {
            config,
            names,
            tensors,
        })
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<T>> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn param_lens(&self) -> Vec<usize> {
        self.tensors.iter().map(|t| t.len()).collect()
    }

    pub fn total_params(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Applies `f` to every tensor's data in store order.
    pub fn update_all(&mut self, mut f: impl FnMut(usize, &mut [T])) {
        for (i, t) in self.tensors.iter_mut().enumerate() {
            f(i, t.data_mut());
        }
    }

    /// One AdamW update over every tensor in store order; `grads` must be
    /// aligned with that order.
    pub fn optimizer_step(&mut self, opt: &mut AdamW<T>, lr: f64, grads: &[&[T]]) -> Result<()> {
        let names: Vec<&str> = self.names.iter().map(|s| s.as_str()).collect();
        let mut params: Vec<&mut [T]> = self.tensors.iter_mut().map(|t| t.data_mut()).collect();
        opt.step(lr, &mut params, grads, &names)
    }

    /// Tracks every parameter on `tape`; `vars` stays aligned with store
    /// order so gradients read back by index.
    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> BoundModel<'t, T> {
        let vars: Vec<Var<'t, T>> = self.tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        let model = assemble(&self.config, &vars);
        BoundModel { vars, model }
    }

    /// Constant (gradient-free) view for inference.
    pub fn bind_constant<'t>(&self) -> ModelVars<'t, T> {
        let vars: Vec<Var<'t, T>> = self
            .tensors
            .iter()
            .map(|t| Var::constant(t.clone()))
            .collect();
        assemble(&self.config, &vars)
    }
}

/// Structured tape handles for one forward pass.
pub struct ModelVars<'t, T: Real> {
    pub patch_kernel: Var<'t, T>,
    pub patch_bias: Var<'t, T>,
    pub positional: Var<'t, T>,
    pub blocks: Vec<BlockVars<'t, T>>,
    pub final_norm: Var<'t, T>,
    pub decoder: DecoderVars<'t, T>,
}

pub struct BoundModel<'t, T: Real> {
    pub vars: Vec<Var<'t, T>>,
    pub model: ModelVars<'t, T>,
}

fn assemble<'t, T: Real>(cfg: &ModelConfig, vars: &[Var<'t, T>]) -> ModelVars<'t, T> {
    let mut it = vars.iter().cloned();
    let mut next = || it.next().expect("store order matches the spec list");
    let patch_kernel = next();
    let patch_bias = next();
    let positional = next();
    let blocks = (0..cfg.n_blocks)
        .map(|_| BlockVars {
            norm_w: next(),
            in_proj: next(),
            conv_w: next(),
            conv_b: next(),
            x_proj: next(),
            dt_w: next(),
            dt_b: next(),
            a_log: next(),
            d_skip: next(),
            out_proj: next(),
            n_state: cfg.n_state,
            dt_rank: cfg.dt_rank,
        })
        .collect();
    let final_norm = next();
    let decoder = DecoderVars {
        mlp_w1: next(),
        mlp_b1: next(),
        mlp_w2: next(),
        mlp_b2: next(),
        pos_w: next(),
        pos_b: next(),
        scale_w: next(),
        scale_b: next(),
        opacity_w: next(),
        opacity_b: next(),
        color_w: next(),
        color_b: next(),
        rot_w: next(),
        rot_b: next(),
        n_bins: cfg.n_bins,
        s_base: cfg.s_base,
        s_max: cfg.s_max,
        disk: cfg.disk,
        straight_through: cfg.straight_through,
    };
    assert!(it.next().is_none(), "store order matches the spec list");
    ModelVars {
        patch_kernel,
        patch_bias,
        positional,
        blocks,
        final_norm,
        decoder,
    }
}

/// Posed images to Gaussians: fuse rays, patchify, cross-scan, run the
/// causal stack, decode one Gaussian per token.
pub fn forward<'t, T: Real>(
    m: &ModelVars<'t, T>,
    cfg: &ModelConfig,
    images: &[Tensor<T>],
    cameras: &[CameraView],
    mode: RotMode<'_, T>,
) -> Result<GaussianVars<'t, T>> {
    if images.len() != cfg.n_views || cameras.len() != cfg.n_views {
        return Err(Error::invalid(format!(
            "{} images and {} cameras for a {}-view model",
            images.len(),
            cameras.len(),
            cfg.n_views
        )));
    }
    let side = cfg.image_size;
    let mut grids = Vec::with_capacity(cfg.n_views);
    for (image, camera) in images.iter().zip(cameras) {
        if camera.width != side || camera.height != side {
            return Err(Error::invalid(format!(
                "camera raster {} x {} does not match the {side} x {side} model",
                camera.width, camera.height
            )));
        }
        let rays = pluecker_rays(camera);
        let fused = fuse_view(image, &rays)?;
        let pixels = Var::constant(fused.pixels);
        grids.push(patch_embed(
            &pixels,
            side,
            side,
            cfg.patch,
            &m.patch_kernel,
            &m.patch_bias,
        )?);
    }
    let (seq, _) = cross_scan(&grids, cfg.grid_side(), cfg.grid_side())?;
    let seq = add_positional(&seq, &m.positional)?;
    let features = reconstructor_forward(&seq, &m.blocks, &m.final_norm)?;
    decode_gaussians(&features, &m.decoder, mode)
}

/// Renders the decoded set from every requested camera; each output is
/// [H*W, 4] RGB+alpha rows.
pub fn render_views<'t, T: Real>(
    g: &GaussianVars<'t, T>,
    views: &[CameraView],
    background: &Var<'t, T>,
) -> Result<Vec<Var<'t, T>>> {
    views
        .iter()
        .map(|v| render_images(g, v, background))
        .collect()
}

/// Optimizer moments aligned with store order, plus the Adam step counter.
pub struct OptState<T> {
    pub t: u64,
    pub moments: Vec<(Vec<T>, Vec<T>)>,
}

pub struct Checkpoint<T: Real> {
    pub params: ParamStore<T>,
    pub step: u64,
    pub opt: Option<OptState<T>>,
}

const CONFIG_FIELDS: usize = 13;

fn config_to_floats(cfg: &ModelConfig) -> Vec<f32> {
    vec![
        cfg.image_size as f32,
        cfg.patch as f32,
        cfg.n_views as f32,
        cfg.c_model as f32,
        cfg.e_inner as f32,
        cfg.n_blocks as f32,
        cfg.n_state as f32,
        cfg.dt_rank as f32,
        cfg.n_bins as f32,
        cfg.disk as u8 as f32,
        cfg.straight_through as u8 as f32,
        cfg.s_base as f32,
        cfg.s_max as f32,
    ]
}

fn config_from_floats(v: &[f32]) -> Result<ModelConfig> {
    if v.len() != CONFIG_FIELDS {
        return Err(Error::format(format!(
            "config vector has {} fields, want {CONFIG_FIELDS}",
            v.len()
        )));
    }
    let dim = |i: usize| -> Result<usize> {
        let f = v[i];
        if !(f.is_finite() && f >= 0.0 && f.fract() == 0.0) {
            return Err(Error::format(format!("config field {i} = {f} is not a size")));
        }
        Ok(f as usize)
    };
    // Shortest-decimal widening: "0.02" stored as f32 comes back as the f64
    // 0.02, not 0.019999999552965164.
    let wide = |f: f32| -> f64 { format!("{f}").parse().unwrap() };
    let cfg = ModelConfig {
        image_size: dim(0)?,
        patch: dim(1)?,
        n_views: dim(2)?,
        c_model: dim(3)?,
        e_inner: dim(4)?,
        n_blocks: dim(5)?,
        n_state: dim(6)?,
        dt_rank: dim(7)?,
        n_bins: dim(8)?,
        disk: dim(9)? != 0,
        straight_through: dim(10)? != 0,
        s_base: wide(v[11]),
        s_max: wide(v[12]),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn to_named<T: Real>(name: String, t: &Tensor<T>) -> NamedTensor {
    NamedTensor {
        name,
        dims: t.shape().to_vec(),
        data: t.data().iter().map(|v| v.to_f64() as f32).collect(),
    }
}

/// Writes parameters, step, configuration, and (optionally) optimizer
/// moments. f32 payloads: exact for f32 training, rounded for f64.
pub fn save_checkpoint<T: Real>(
    path: &Path,
    store: &ParamStore<T>,
    step: u64,
    opt: Option<&AdamW<T>>,
) -> Result<()> {
    let mut tensors = vec![
        NamedTensor {
            name: "meta/config".into(),
            dims: vec![CONFIG_FIELDS],
            data: config_to_floats(&store.config),
        },
        NamedTensor {
            name: "meta/step".into(),
            dims: vec![1],
            data: vec![step as f32],
        },
    ];
    for (name, t) in store.names.iter().zip(&store.tensors) {
        tensors.push(to_named(format!("param/{name}"), t));
    }
    if let Some(o) = opt {
        if o.num_params() != store.len() {
            return Err(Error::invalid(format!(
                "optimizer tracks {} parameters, store holds {}",
                o.num_params(),
                store.len()
            )));
        }
        tensors.push(NamedTensor {
            name: "opt/t".into(),
            dims: vec![1],
            data: vec![o.t as f32],
        });
        for (i, name) in store.names.iter().enumerate() {
            let (m, v) = o.state(i);
            let dims = store.tensors[i].shape().to_vec();
            tensors.push(NamedTensor {
                name: format!("opt/m/{name}"),
                dims: dims.clone(),
                data: m.iter().map(|x| x.to_f64() as f32).collect(),
            });
            tensors.push(NamedTensor {
                name: format!("opt/v/{name}"),
                dims,
                data: v.iter().map(|x| x.to_f64() as f32).collect(),
            });
        }
    }
    write_tensors(path, &tensors)
}

fn take_exact<T: Real>(
    found: &mut std::collections::HashMap<String, NamedTensor>,
    key: &str,
    shape: &[usize],
) -> Result<Tensor<T>> {
    let nt = found
        .remove(key)
        .ok_or_else(|| Error::format(format!("checkpoint is missing '{key}'")))?;
    if nt.dims.as_slice() != shape {
        return Err(Error::shape(format!(
            "'{key}' has shape {:?}, want {:?}",
            nt.dims, shape
        )));
    }
    if nt.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("checkpoint tensor '{key}'")));
    }
    Ok(Tensor::from_vec(
        nt.dims,
        nt.data.iter().map(|&v| T::from_f64(v as f64)).collect(),
    ))
}

/// Reads a checkpoint back, validating the tensor inventory against the
/// stored configuration: every expected name present with its exact shape,
/// nothing extra, all values finite.
pub fn load_checkpoint<T: Real>(path: &Path) -> Result<Checkpoint<T>> {
    let mut found: std::collections::HashMap<String, NamedTensor> = read_tensors(path)?
        .into_iter()
        .map(|t| (t.name.clone(), t))
        .collect();

    let cfg_t = found
        .remove("meta/config")
        .ok_or_else(|| Error::format("checkpoint is missing 'meta/config'"))?;
    let config = config_from_floats(&cfg_t.data)?;
    let step_t: Tensor<T> = take_exact(&mut found, "meta/step", &[1])?;
    let step = step_t.data()[0].to_f64() as u64;

    let specs = param_specs(&config);
    let mut params = ParamStore {
        config,
        names: Vec::with_capacity(specs.len()),
        tensors: Vec::with_capacity(specs.len()),
    };
    for spec in &specs {
        let t = take_exact(&mut found, &format!("param/{}", spec.name), &spec.shape)?;
        params.names.push(spec.name.clone());
        params.tensors.push(t);
    }

    let opt = if found.contains_key("opt/t") {
        let t_t: Tensor<T> = take_exact(&mut found, "opt/t", &[1])?;
        let mut moments = Vec::with_capacity(specs.len());
        for spec in &specs {
            let m = take_exact(&mut found, &format!("opt/m/{}", spec.name), &spec.shape)?;
            let v = take_exact(&mut found, &format!("opt/v/{}", spec.name), &spec.shape)?;
            moments.push((m.data().to_vec(), v.data().to_vec()));
        }
        Some(OptState {
            t: t_t.data()[0].to_f64() as u64,
            moments,
        })
    } else {
        None
    };

    if let Some(stray) = found.keys().next() {
        return Err(Error::format(format!(
            "checkpoint carries unexpected tensor '{stray}'"
        )));
    }
    Ok(Checkpoint { params, step, opt })
}

/// Rebuilds an optimizer from saved moments.
pub fn restore_optimizer<T: Real>(
    cfg: AdamWConfig,
    store: &ParamStore<T>,
    state: &OptState<T>,
) -> AdamW<T> {
    let mut opt = AdamW::new(cfg, &store.param_lens());
    for (i, (m, v)) in state.moments.iter().enumerate() {
        opt.restore_state(i, m, v, state.t);
    }
    opt
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::{gumbel_noise, rotation_table};
    use crate::geometry::orbit_ring;
    use crate::loss::{composite_loss, LossWeights, Perceptual, ViewTarget};
    use crate::splat::WHITE;

    fn tiny() -> ModelConfig {
        ModelConfig {
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
        }
    }

    fn flat_images<T: Real>(cfg: &ModelConfig, level: f64) -> Vec<Tensor<T>> {
        (0..cfg.n_views)
            .map(|_| {
                Tensor::full(
                    vec![cfg.image_size, cfg.image_size, 3],
                    T::from_f64(level),
                )
            })
            .collect()
    }

    fn ring(cfg: &ModelConfig) -> Vec<CameraView> {
        orbit_ring(cfg.n_views, 20.0, cfg.image_size, 40.0)
    }

    #[test]
    fn initialization_is_deterministic_and_structured() {
        let a: ParamStore<f64> = ParamStore::init(ModelConfig::desk(), 7).unwrap();
        let b: ParamStore<f64> = ParamStore::init(ModelConfig::desk(), 7).unwrap();
        let c: ParamStore<f64> = ParamStore::init(ModelConfig::desk(), 8).unwrap();
        assert_eq!(a.names(), b.names());
        for (x, y) in a.tensors().iter().zip(b.tensors()) {
            assert_eq!(x.data(), y.data());
        }
        let same_kernel = a.tensor("tokenizer/patch_kernel").unwrap().data()
            == c.tensor("tokenizer/patch_kernel").unwrap().data();
        assert!(!same_kernel, "different seeds must give different weights");

        for (name, t) in a.names().iter().zip(a.tensors()) {
            assert!(
                t.data().iter().all(|v| v.is_finite()),
                "{name} has a non-finite entry"
            );
        }
        let a_log = a.tensor("blocks/0/a_log").unwrap();
        for (i, v) in a_log.data().iter().enumerate() {
            let n = i % 8;
            assert!((v - ((n + 1) as f64).ln()).abs() < 1e-12);
        }
        let dt_b = a.tensor("blocks/0/dt_b").unwrap();
        let lo = (1e-3f64.exp_m1()).ln();
        let hi = (1e-1f64.exp_m1()).ln();
        for v in dt_b.data() {
            assert!((lo - 1e-9..=hi + 1e-9).contains(v), "dt bias {v} out of range");
        }
        assert_eq!(a.tensor("final_norm").unwrap().data(), &[1.0; 64]);
    }

    #[test]
    fn desk_shapes_and_lengths_match_the_architecture() {
        let cfg = ModelConfig::desk();
        assert_eq!(cfg.seq_len(), 1024);
        assert_eq!(cfg.tokens_per_view(), 64);
        assert_eq!(ModelConfig::paper().seq_len(), 16384);

        let store: ParamStore<f32> = ParamStore::init(cfg, 1).unwrap();
        let expect = [
            ("tokenizer/patch_kernel", vec![8 * 8 * 9, 64]),
            ("tokenizer/positional", vec![1024, 64]),
            ("blocks/0/in_proj", vec![64, 256]),
            ("blocks/1/x_proj", vec![128, 4 + 16]),
            ("blocks/1/a_log", vec![128, 8]),
            ("decoder/pos_w", vec![64, 96]),
            ("decoder/rot_w", vec![64, 32]),
        ];
        for (name, shape) in expect {
            assert_eq!(
                store.tensor(name).unwrap().shape(),
                shape.as_slice(),
                "{name}"
            );
        }
        let bad = ModelConfig {
            patch: 7,
            ..ModelConfig::desk()
        };
        assert!(ParamStore::<f32>::init(bad, 1).is_err());
    }

    #[test]
    fn forward_decodes_one_valid_gaussian_per_token() {
        let cfg = tiny();
        let store: ParamStore<f64> = ParamStore::init(cfg, 3).unwrap();
        let model = store.bind_constant();
        let g = forward(
            &model,
            &cfg,
            &flat_images(&cfg, 0.5),
            &ring(&cfg),
            RotMode::Infer,
        )
        .unwrap();
        assert_eq!(g.count(), cfg.seq_len());
        let set = g.snapshot();
        set.validate().unwrap();

        // inference rotations are exact table rows
        let table: Tensor<f64> = rotation_table();
        for k in 0..set.count() {
            let q = &set.rot.data()[k * 4..(k + 1) * 4];
            let hit = (0..ROT_CLASSES)
                .any(|r| table.data()[r * 4..(r + 1) * 4] == *q);
            assert!(hit, "rotation {k} is not a canonical class");
        }

        let wrong_count = forward(
            &model,
            &cfg,
            &flat_images(&cfg, 0.5)[..1],
            &ring(&cfg)[..1],
            RotMode::Infer,
        );
        assert!(wrong_count.is_err());
    }

    #[test]
    fn every_parameter_receives_a_finite_gradient() {
        let cfg = tiny();
        let store: ParamStore<f64> = ParamStore::init(cfg, 5).unwrap();
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let noise = gumbel_noise(&Stream::new(11, "model-test"), cfg.seq_len());
        let g = forward(
            &bound.model,
            &cfg,
            &flat_images(&cfg, 0.35),
            &ring(&cfg),
            RotMode::Train {
                tau: 1.0,
                noise: &noise,
            },
        )
        .unwrap();
        let bg = Var::constant(Tensor::from_vec(
            vec![3],
            WHITE.iter().map(|&v| v).collect(),
        ));
        let cams = ring(&cfg);
        let renders = render_views(&g, &cams[..1], &bg).unwrap();
        let n = cfg.image_size * cfg.image_size;
        let target = ViewTarget {
            height: cfg.image_size,
            width: cfg.image_size,
            rgb: Tensor::full(vec![n, 3], 0.2),
            alpha: Tensor::full(vec![n, 1], 1.0),
        };
        let (loss, _) = composite_loss(
            &renders,
            &[target],
            &g.opacity,
            &LossWeights::default(),
            Perceptual::Off,
        )
        .unwrap();
        tape.backward(&loss).unwrap();

        for (name, var) in store.names().iter().zip(&bound.vars) {
            let grad = tape
                .grad(var)
                .unwrap_or_else(|| panic!("{name} is unreachable from the loss"));
            assert!(
                grad.iter().all(|v| v.is_finite()),
                "{name} has a non-finite gradient"
            );
            assert!(
                grad.iter().any(|v| *v != 0.0),
                "{name} gradient is identically zero"
            );
        }
    }

    #[test]
    fn checkpoints_round_trip_parameters_step_and_moments() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let cfg = tiny();
        let store: ParamStore<f32> = ParamStore::init(cfg, 9).unwrap();

        let lens = store.param_lens();
        let mut opt: AdamW<f32> = AdamW::new(AdamWConfig::default(), &lens);
        for (i, &len) in lens.iter().enumerate() {
            let m: Vec<f32> = (0..len).map(|j| (i + j) as f32 * 0.001).collect();
            let v: Vec<f32> = (0..len).map(|j| (j + 1) as f32 * 0.002).collect();
            opt.restore_state(i, &m, &v, 41);
        }
        save_checkpoint(&path, &store, 1234, Some(&opt)).unwrap();

        let back: Checkpoint<f32> = load_checkpoint(&path).unwrap();
        assert_eq!(back.step, 1234);
        assert_eq!(back.params.config, cfg);
        assert_eq!(back.params.names(), store.names());
        for (a, b) in back.params.tensors().iter().zip(store.tensors()) {
            assert_eq!(a.data(), b.data(), "f32 round trip must be exact");
        }
        let opt_state = back.opt.expect("optimizer state saved");
        assert_eq!(opt_state.t, 41);
        let restored = restore_optimizer(AdamWConfig::default(), &back.params, &opt_state);
        assert_eq!(restored.t, 41);
        for i in 0..lens.len() {
            assert_eq!(restored.state(i), opt.state(i));
        }

        save_checkpoint(&path, &store, 7, None).unwrap();
        let plain: Checkpoint<f32> = load_checkpoint(&path).unwrap();
        assert_eq!(plain.step, 7);
        assert!(plain.opt.is_none());
    }

    #[test]
    fn corrupted_checkpoints_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let store: ParamStore<f32> = ParamStore::init(tiny(), 2).unwrap();
        save_checkpoint(&path, &store, 10, None).unwrap();
        let tensors = read_tensors(&path).unwrap();

        let rewrite = |mutate: &dyn Fn(&mut Vec<NamedTensor>)| -> Result<Checkpoint<f32>> {
            let mut ts = tensors.clone();
            mutate(&mut ts);
            let p = dir.path().join("mutated.ckpt");
            write_tensors(&p, &ts).unwrap();
            load_checkpoint(&p)
        };

        assert!(rewrite(&|ts| {
            ts.retain(|t| t.name != "param/final_norm");
        })
        .is_err());
        assert!(rewrite(&|ts| {
            ts.push(NamedTensor {
                name: "param/mystery".into(),
                dims: vec![1],
                data: vec![0.0],
            });
        })
        .is_err());
        assert!(rewrite(&|ts| {
            let t = ts.iter_mut().find(|t| t.name == "param/final_norm").unwrap();
            t.dims = vec![4];
            t.data = vec![1.0; 4];
        })
        .is_err());
        assert!(rewrite(&|ts| {
            let t = ts.iter_mut().find(|t| t.name == "param/final_norm").unwrap();
            t.data[0] = f32::NAN;
        })
        .is_err());
        assert!(rewrite(&|ts| {
            let t = ts.iter_mut().find(|t| t.name == "meta/config").unwrap();
            t.data[1] = 7.0;
        })
        .is_err());
    }
}
