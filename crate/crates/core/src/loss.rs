//! The composite training objective: per-view RGB and alpha-mask MSE, an
//! optional perceptual term from a seed-pinned random feature stack, and an
//! opacity regularizer pushing surviving Gaussians toward full opacity.
//!
//! Every image term is a per-pixel mean, so the objective is invariant to
//! image resolution. The total is
//!   mean over views of [rgb + w_mask * mask + w_perc * perceptual]
//!   + w_reg * mean(1 - alpha).

use std::str::FromStr;
use std::sync::Arc;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::tensor::{Real, Tensor};

/// Nonnegative weights for the non-RGB terms.
#[derive(Clone, Copy, Debug)]
pub struct LossWeights {
    pub mask: f64,
    pub perc: f64,
    pub reg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            mask: 1.0,
            perc: 0.6,
            reg: 0.001,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("mask", self.mask), ("perc", self.perc), ("reg", self.reg)] {
            if !(v >= 0.0) {
                return Err(Error::invalid(format!("loss weight {name} = {v} is negative")));
            }
        }
        Ok(())
    }
}

/// Perceptual-term backend.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Perceptual {
    Off,
    /// Multi-scale responses of a fixed random convolution stack, compared
    /// after resizing both images to `resolution` squared.
    RandomFeatures { resolution: usize },
}

/// The standard evaluation resolution for the perceptual term.
pub const PERCEPTUAL_RESOLUTION: usize = 256;

impl FromStr for Perceptual {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "off" => Ok(Perceptual::Off),
            "random-features" => Ok(Perceptual::RandomFeatures {
                resolution: PERCEPTUAL_RESOLUTION,
            }),
            other => Err(Error::invalid(format!(
                "unknown perceptual backend {other:?}; use off or random-features"
            ))),
        }
    }
}

/// One supervised view's ground truth.
#[derive(Clone)]
pub struct ViewTarget<T: Real> {
    pub height: usize,
    pub width: usize,
    /// [H*W, 3] in [0,1].
    pub rgb: Tensor<T>,
    /// [H*W, 1] in [0,1].
    pub alpha: Tensor<T>,
}

/// Detached per-view term values.
#[derive(Clone, Copy, Debug)]
pub struct ViewTerms {
    pub rgb_mse: f64,
    pub mask_mse: f64,
    pub perceptual: f64,
}

/// Detached breakdown of one composite loss evaluation.
#[derive(Clone, Debug)]
pub struct LossReport {
    pub total: f64,
    pub rgb_mse: f64,
    pub mask_mse: f64,
    pub perceptual: f64,
    pub opacity_reg: f64,
    pub views: Vec<ViewTerms>,
}

fn check_same_shape<T: Real>(pred: &Var<'_, T>, gt: &Tensor<T>) -> Result<()> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape(format!(
            "prediction shape {:?} vs target {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    Ok(())
}

/// Mean squared error over all pixels and channels.
pub fn rgb_mse<'t, T: Real>(pred: &Var<'t, T>, gt: &Tensor<T>) -> Result<Var<'t, T>> {
    check_same_shape(pred, gt)?;
    let diff = pred.sub(&Var::constant(gt.clone()));
    Ok(diff.mul(&diff).mean())
}

/// Mean squared error over a single-channel mask.
pub fn mask_mse<'t, T: Real>(pred: &Var<'t, T>, gt: &Tensor<T>) -> Result<Var<'t, T>> {
    rgb_mse(pred, gt)
}

/// Mean of (1 - alpha) over all Gaussians.
pub fn opacity_reg<'t, T: Real>(opacity: &Var<'t, T>) -> Var<'t, T> {
    opacity.neg().add_scalar(1.0).mean()
}

struct FeatureStage {
    weight: Tensor<f64>,
    c_in: usize,
    c_out: usize,
    stride: usize,
}

/// 3x3 zero-padded im2col indices; -1 marks padding taps.
fn conv_indices(h: usize, w: usize, c_in: usize, stride: usize) -> (Arc<Vec<i64>>, usize, usize) {
    let h2 = h.div_ceil(stride);
    let w2 = w.div_ceil(stride);
    let mut idx = Vec::with_capacity(h2 * w2 * 9 * c_in);
    for r2 in 0..h2 {
        for c2 in 0..w2 {
            for dr in 0..3_isize {
                for dc in 0..3_isize {
                    let r = (r2 * stride) as isize + dr - 1;
                    let c = (c2 * stride) as isize + dc - 1;
                    let base = if r < 0 || c < 0 || r >= h as isize || c >= w as isize {
                        -1
                    } else {
                        (r as usize * w + c as usize) as i64 * c_in as i64
                    };
                    for ci in 0..c_in as i64 {
                        idx.push(if base < 0 { -1 } else { base + ci });
                    }
                }
            }
        }
    }
    (Arc::new(idx), h2, w2)
}

fn feature_stack() -> Vec<FeatureStage> {
    let s = Stream::new(0x5eed, "perceptual-features");
    let stage = |sub: u64, c_in: usize, c_out: usize, stride: usize| -> FeatureStage {
        let st = s.substream(sub);
        let fan_in = (9 * c_in) as f64;
        let scale = fan_in.sqrt().recip();
        let data: Vec<f64> = (0..9 * c_in * c_out)
            .map(|i| st.normal_at(i as u64) * scale)
            .collect();
        FeatureStage {
            weight: Tensor::from_vec(vec![9 * c_in, c_out], data),
            c_in,
            c_out,
            stride,
        }
    };
    vec![stage(0, 3, 8, 1), stage(1, 8, 16, 2), stage(2, 16, 16, 2)]
}

fn stage_responses<'t, T: Real>(
    rgb: &Var<'t, T>,
    height: usize,
    width: usize,
    resolution: usize,
    stages: &[FeatureStage],
) -> Vec<Var<'t, T>> {
    let resized = rgb
        .reshape(vec![height, width, 3])
        .bilinear_resize(resolution, resolution)
        .reshape(vec![resolution * resolution, 3]);
    let mut responses = Vec::with_capacity(stages.len());
    let mut x = resized;
    let (mut h, mut w) = (resolution, resolution);
    for stage in stages {
        let (idx, h2, w2) = conv_indices(h, w, stage.c_in, stage.stride);
        let cols = x.gather_elements(idx, vec![h2 * w2, 9 * stage.c_in]);
        let weight = Var::constant(Tensor::<T>::from_f64(&stage.weight));
        x = cols.matmul(&weight).silu();
        (h, w) = (h2, w2);
        let _ = stage.c_out;
        responses.push(x.clone());
    }
    responses
}

/// Distance between the random-feature responses of two images; zero for
/// identical inputs, differentiable in the prediction.
pub fn perceptual<'t, T: Real>(
    pred: &Var<'t, T>,
    gt: &Tensor<T>,
    height: usize,
    width: usize,
    backend: Perceptual,
) -> Result<Var<'t, T>> {
    check_same_shape(pred, gt)?;
    let Perceptual::RandomFeatures { resolution } = backend else {
        return Ok(pred.sum().mul_scalar(0.0));
    };
    if pred.shape() != [height * width, 3] {
        return Err(Error::shape(format!(
            "image shape {:?} does not match {height} x {width}",
            pred.shape()
        )));
    }
    let stages = feature_stack();
    let fp = stage_responses(pred, height, width, resolution, &stages);
    let fg = stage_responses(&Var::constant(gt.clone()), height, width, resolution, &stages);
    let mut total: Option<Var<'t, T>> = None;
    for (a, b) in fp.iter().zip(&fg) {
        let d = a.sub(b);
        let term = d.mul(&d).mean();
        total = Some(match total {
            Some(t) => t.add(&term),
            None => term,
        });
    }
    Ok(total.unwrap())
}

/// Full objective over aligned (render, target) view pairs; the render
/// carries RGB in columns 0..3 and alpha in column 3.
pub fn composite_loss<'t, T: Real>(
    renders: &[Var<'t, T>],
    targets: &[ViewTarget<T>],
    opacity: &Var<'t, T>,
    weights: &LossWeights,
    backend: Perceptual,
) -> Result<(Var<'t, T>, LossReport)> {
    weights.validate()?;
    if renders.is_empty() {
        return Err(Error::invalid("composite loss needs at least one view"));
    }
    if renders.len() != targets.len() {
        return Err(Error::shape(format!(
            "{} renders vs {} targets",
            renders.len(),
            targets.len()
        )));
    }
    let mut views = Vec::with_capacity(renders.len());
    let mut total: Option<Var<'t, T>> = None;
    for (render, target) in renders.iter().zip(targets) {
        let n = target.height * target.width;
        if render.shape() != [n, 4] {
            return Err(Error::shape(format!(
                "render shape {:?}, want [{n}, 4]",
                render.shape()
            )));
        }
        let rgb = render.narrow_cols(0, 3);
        let alpha = render.narrow_cols(3, 1);
        let t_rgb = rgb_mse(&rgb, &target.rgb)?;
        let t_mask = mask_mse(&alpha, &target.alpha)?;
        let t_perc = perceptual(&rgb, &target.rgb, target.height, target.width, backend)?;
        views.push(ViewTerms {
            rgb_mse: t_rgb.data()[0].to_f64(),
            mask_mse: t_mask.data()[0].to_f64(),
            perceptual: t_perc.data()[0].to_f64(),
        });
        let view_term = t_rgb
            .add(&t_mask.mul_scalar(weights.mask))
            .add(&t_perc.mul_scalar(weights.perc));
        total = Some(match total {
            Some(t) => t.add(&view_term),
            None => view_term,
        });
    }
    let n_views = renders.len() as f64;
    let reg = opacity_reg(opacity);
    let reg_val = reg.data()[0].to_f64();
    let loss = total
        .unwrap()
        .mul_scalar(1.0 / n_views)
        .add(&reg.mul_scalar(weights.reg));

    let mean = |f: fn(&ViewTerms) -> f64| views.iter().map(f).sum::<f64>() / n_views;
    let report = LossReport {
        total: loss.data()[0].to_f64(),
        rgb_mse: mean(|v| v.rgb_mse),
        mask_mse: mean(|v| v.mask_mse),
        perceptual: mean(|v| v.perceptual),
        opacity_reg: reg_val,
        views,
    };
    Ok((loss, report))
}
