//! AdamW with decoupled weight decay, warmup-cosine schedule, and global
//! gradient-norm clipping.

use crate::error::{Error, Result};
use crate::tensor::Real;

#[derive(Clone, Copy, Debug)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// Per-parameter first/second moment state; the step counter advances once
/// per `step` call regardless of how many parameters are registered.
pub struct AdamW<T: Real> {
    pub cfg: AdamWConfig,
    pub t: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(cfg: AdamWConfig, param_lens: &[usize]) -> Self {
        AdamW {
            cfg,
            t: 0,
            m: param_lens.iter().map(|&n| vec![T::ZERO; n]).collect(),
            v: param_lens.iter().map(|&n| vec![T::ZERO; n]).collect(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.m.len()
    }

    pub fn state(&self, i: usize) -> (&[T], &[T]) {
        (&self.m[i], &self.v[i])
    }

    pub fn restore_state(&mut self, i: usize, m: &[T], v: &[T], t: u64) {
        self.m[i].copy_from_slice(m);
        self.v[i].copy_from_slice(v);
        self.t = t;
    }

    /// One decoupled-weight-decay Adam step over all parameters:
    ///   p -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)
    /// A non-finite gradient aborts before any parameter is touched and
    /// reports the offending parameter's name.
    pub fn step(
        &mut self,
        lr: f64,
        params: &mut [&mut [T]],
        grads: &[&[T]],
        names: &[&str],
    ) -> Result<()> {
        assert_eq!(params.len(), self.m.len(), "parameter count mismatch");
        assert_eq!(grads.len(), self.m.len(), "gradient count mismatch");
        for (i, g) in grads.iter().enumerate() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of parameter '{}'",
                    names.get(i).copied().unwrap_or("?")
                )));
            }
        }
        self.t += 1;
        let b1 = T::from_f64(self.cfg.beta1);
        let b2 = T::from_f64(self.cfg.beta2);
        let one_m_b1 = T::ONE - b1;
        let one_m_b2 = T::ONE - b2;
        let bc1 = T::from_f64(1.0 - self.cfg.beta1.powi(self.t as i32));
        let bc2 = T::from_f64(1.0 - self.cfg.beta2.powi(self.t as i32));
        let eps = T::from_f64(self.cfg.eps);
        let lr_t = T::from_f64(lr);
        let wd = T::from_f64(self.cfg.weight_decay);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads.iter())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            assert_eq!(p.len(), m.len(), "parameter length changed");
            for i in 0..p.len() {
                m[i] = b1 * m[i] + one_m_b1 * g[i];
                v[i] = b2 * v[i] + one_m_b2 * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr_t * (m_hat / (v_hat.sqrt() + eps) + wd * p[i]);
            }
        }
        Ok(())
    }
}

/// Learning rate at an epoch: linear warmup from zero to `peak` over
/// `warmup` epochs, then cosine decay to `floor` at `total`.
pub fn lr_at(epoch: usize, total: usize, warmup: usize, peak: f64, floor: f64) -> f64 {
    if warmup > 0 && epoch < warmup {
        return peak * epoch as f64 / warmup as f64;
    }
    if epoch >= total {
        return floor;
    }
    let span = (total - warmup).max(1) as f64;
    let p = (epoch - warmup) as f64 / span;
    floor + (peak - floor) * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
}

/// Scales gradients in place so their global L2 norm does not exceed
/// `max_norm`; returns the pre-clip norm.
pub fn clip_grad_norm<T: Real>(grads: &mut [&mut [T]], max_norm: f64) -> f64 {
    let mut sq = 0.0f64;
    for g in grads.iter() {
        for v in g.iter() {
            let v = v.to_f64();
            sq += v * v;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = T::from_f64(max_norm / norm);
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
    }
    norm
}
