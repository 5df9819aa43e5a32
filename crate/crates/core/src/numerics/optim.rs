use std::collections::BTreeMap;

use super::params::ParamStore;
use super::scalar::{lit, Scalar};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Linear warmup to `peak_lr`, then inverse-square-root decay.
pub fn lr_at_step(step: u64, peak_lr: f64, warmup: u64) -> f64 {
    let step = step.max(1) as f64;
    let warmup = warmup.max(1) as f64;
    peak_lr * (step / warmup).min((warmup / step).sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    /// Exponential moving average of the weights; `None` disables it.
    pub ema_decay: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            peak_lr: 1.8e-3,
            warmup_steps: 1000,
            ema_decay: Some(0.999),
        }
    }
}

/// Adam moments plus the optional EMA shadow, keyed by parameter name.
#[derive(Clone, Debug)]
pub struct OptimizerState<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub first_moment: BTreeMap<String, Tensor<T>>,
    pub second_moment: BTreeMap<String, Tensor<T>>,
    pub ema_shadow: Option<BTreeMap<String, Tensor<T>>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(config: AdamConfig) -> Self {
        let ema_shadow = config.ema_decay.map(|_| BTreeMap::new());
        Self {
            config,
            step: 0,
            first_moment: BTreeMap::new(),
            second_moment: BTreeMap::new(),
            ema_shadow,
        }
    }

    /// Decay actually applied at the current step. Early steps use a smaller
    /// decay so the shadow is not dominated by the initialization.
    pub fn effective_ema_decay(&self) -> Option<f64> {
        self.config.ema_decay.map(|d| {
            let s = self.step as f64;
            d.min((1.0 + s) / (10.0 + s))
        })
    }

    /// `params` with every tracked parameter replaced by its EMA shadow.
    pub fn evaluation_weights(&self, params: &ParamStore<T>) -> ParamStore<T> {
        let mut out = params.clone();
        if let Some(shadow) = &self.ema_shadow {
            for (name, t) in shadow {
                out.insert(name.clone(), t.clone());
            }
        }
        out
    }
}

/// One bias-corrected Adam update of the parameters named in `grads`.
pub fn adam_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &BTreeMap<String, Tensor<T>>,
    state: &mut OptimizerState<T>,
) -> Result<()> {
    for (name, g) in grads {
        let p = params.get(name)?;
        if p.shape() != g.shape() {
            return Err(Error::Dimension(format!(
                "gradient for {name} has shape {:?}, parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
        if !g.all_finite() {
            return Err(Error::Training(format!("non-finite gradient for {name}")));
        }
    }
    state.step += 1;
    let cfg = state.config.clone();
    let t = state.step as i32;
    let lr = lr_at_step(state.step, cfg.peak_lr, cfg.warmup_steps);
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2): (T, T) = (lit(cfg.beta1), lit(cfg.beta2));
    let ema = state.effective_ema_decay();

    for (name, g) in grads {
        let p = params.get_mut(name)?;
        let m = state
            .first_moment
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        let v = state
            .second_moment
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        if let Some(shadow) = state.ema_shadow.as_mut() {
            shadow.entry(name.clone()).or_insert_with(|| p.clone());
        }
        for i in 0..g.numel() {
            let gi = g.data()[i];
            let mi = b1 * m.data()[i] + (T::one() - b1) * gi;
            let vi = b2 * v.data()[i] + (T::one() - b2) * gi * gi;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let m_hat = mi.to_f64().unwrap() / bc1;
            let v_hat = vi.to_f64().unwrap() / bc2;
            let delta = lr * m_hat / (v_hat.sqrt() + cfg.epsilon);
            p.data_mut()[i] -= lit::<T>(delta);
        }
        if let (Some(decay), Some(shadow)) = (ema, state.ema_shadow.as_mut()) {
            let s = shadow.get_mut(name).expect("shadow initialized above");
            // Incremental form: a parameter that did not move leaves its
            // shadow bit-identical.
            let rate: T = lit(1.0 - decay);
            for (si, pi) in s.data_mut().iter_mut().zip(p.data()) {
                *si = if decay == 0.0 { *pi } else { *si + rate * (*pi - *si) };
            }
        }
    }
    Ok(())
}
