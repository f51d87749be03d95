use std::collections::BTreeMap;

use super::{Result, TrainError};
use crate::model::ModelParams;
use crate::numerics::Array;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            clip: Some(5.0),
        }
    }
}

/// First and second moments per parameter, created lazily on first update.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OptimState {
    pub step: u64,
    pub m: BTreeMap<String, Array<f32>>,
    pub v: BTreeMap<String, Array<f32>>,
}

/// One bias-corrected Adam update of the parameters named in `grads`.
/// Returns the gradient norm before clipping. Nothing is modified if any
/// gradient is non-finite.
pub fn adam_step(
    params: &mut ModelParams<f32>,
    grads: &BTreeMap<String, Array<f32>>,
    state: &mut OptimState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<f64> {
    let mut sq = 0.0f64;
    for (name, g) in grads {
        let p = params.get(name)?;
        if p.shape() != g.shape() {
            return Err(TrainError::GradShape(name.clone()));
        }
        if !g.is_finite() {
            return Err(TrainError::NonFiniteGrad(name.clone()));
        }
        sq += g.data().iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>();
    }
    let norm = sq.sqrt();
    let scale = match cfg.clip {
        Some(c) if norm > c => c / norm,
        _ => 1.0,
    };
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (name, g) in grads {
        let p = params.get_mut(name)?;
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Array::zeros(p.rows(), p.cols()));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Array::zeros(p.rows(), p.cols()));
        for (((w, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut())
            .zip(v.data_mut().iter_mut())
        {
            let gi = gi as f64 * scale;
            let mn = cfg.beta1 * *mi as f64 + (1.0 - cfg.beta1) * gi;
            let vn = cfg.beta2 * *vi as f64 + (1.0 - cfg.beta2) * gi * gi;
            *mi = mn as f32;
            *vi = vn as f32;
            let update = lr * (mn / c1) / ((vn / c2).sqrt() + cfg.eps);
            *w = (*w as f64 - update) as f32;
        }
    }
    Ok(norm)
}

/// Linear warmup to `peak`, then linear decay to zero at `total`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub peak: f64,
    pub warmup: u64,
    pub total: u64,
}

impl Schedule {
    pub fn new(peak: f64, warmup: u64, total: u64) -> Result<Self> {
        if !(0 < warmup && warmup < total) || !(peak > 0.0) {
            return Err(TrainError::InvalidConfig(format!(
                "schedule needs 0 < warmup < total and peak > 0 (got {warmup}, {total}, {peak})"
            )));
        }
        Ok(Self { peak, warmup, total })
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        if step <= self.warmup {
            self.peak * step as f64 / self.warmup as f64
        } else if step <= self.total {
            self.peak * (self.total - step) as f64 / (self.total - self.warmup) as f64
        } else {
            0.0
        }
    }
}
