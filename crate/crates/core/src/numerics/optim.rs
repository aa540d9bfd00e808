//! AdamW: Adam moments with weight decay applied directly to the weights.

use serde::{Deserialize, Serialize};

use super::{LayerParams, Real};
use crate::error::{config_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Moments<T> {
    m_w: Vec<T>,
    v_w: Vec<T>,
    m_b: Vec<T>,
    v_b: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimState<T> {
    pub config: AdamWConfig,
    step: u64,
    moments: Vec<Moments<T>>,
}

impl<T: Real> OptimState<T> {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn cast<U: Real>(&self) -> OptimState<U> {
        let conv = |v: &[T]| v.iter().map(|&x| U::lit(x.to_f64_lossy())).collect();
        OptimState {
            config: self.config,
            step: self.step,
            moments: self
                .moments
                .iter()
                .map(|m| Moments {
                    m_w: conv(&m.m_w),
                    v_w: conv(&m.v_w),
                    m_b: conv(&m.m_b),
                    v_b: conv(&m.v_b),
                })
                .collect(),
        }
    }

    /// Flattened `(first, second)` moments in layer order, for checkpointing.
    pub fn export_moments(&self) -> Vec<(Vec<T>, Vec<T>)> {
        self.moments
            .iter()
            .map(|m| {
                (
                    m.m_w.iter().chain(&m.m_b).copied().collect(),
                    m.v_w.iter().chain(&m.v_b).copied().collect(),
                )
            })
            .collect()
    }

    /// Restores moments exported by [`OptimState::export_moments`].
    pub fn import_moments(
        &mut self,
        step: u64,
        params: &[&mut LayerParams<T>],
        moments: Vec<(Vec<T>, Vec<T>)>,
    ) -> Result<()> {
        if moments.len() != params.len() {
            return config_err("optimizer state does not match parameter list");
        }
        self.moments.clear();
        for (p, (m, v)) in params.iter().zip(moments) {
            let nw = p.weight.len();
            if m.len() != p.param_count() || v.len() != p.param_count() {
                return config_err(format!("optimizer moments for {} have wrong size", p.name));
            }
            self.moments.push(Moments {
                m_w: m[..nw].to_vec(),
                m_b: m[nw..].to_vec(),
                v_w: v[..nw].to_vec(),
                v_b: v[nw..].to_vec(),
            });
        }
        self.step = step;
        Ok(())
    }
}

fn adamw_update<T: Real>(
    values: &mut [T],
    grads: &mut [T],
    m: &mut [T],
    v: &mut [T],
    cfg: &AdamWConfig,
    bias1: T,
    bias2: T,
) {
    let lr = T::lit(cfg.lr);
    let decay = T::one() - T::lit(cfg.lr * cfg.weight_decay);
    let b1 = T::lit(cfg.beta1);
    let b2 = T::lit(cfg.beta2);
    let eps = T::lit(cfg.eps);
    for i in 0..values.len() {
        let g = grads[i];
        values[i] *= decay;
        m[i] = b1 * m[i] + (T::one() - b1) * g;
        v[i] = b2 * v[i] + (T::one() - b2) * g * g;
        let m_hat = m[i] / bias1;
        let v_hat = v[i] / bias2;
        values[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        grads[i] = T::zero();
    }
}

/// Applies one AdamW update to every layer and zeroes the gradients.
pub fn optimizer_step<T: Real>(
    params: &mut [&mut LayerParams<T>],
    state: &mut OptimState<T>,
) -> Result<()> {
    if state.moments.is_empty() {
        state.moments = params
            .iter()
            .map(|p| Moments {
                m_w: vec![T::zero(); p.weight.len()],
                v_w: vec![T::zero(); p.weight.len()],
                m_b: vec![T::zero(); p.bias.len()],
                v_b: vec![T::zero(); p.bias.len()],
            })
            .collect();
    }
    if state.moments.len() != params.len() {
        return config_err("optimizer state was built for a different parameter list");
    }
    state.step += 1;
    let t = state.step as i32;
    let bias1 = T::one() - T::lit(state.config.beta1).powi(t);
    let bias2 = T::one() - T::lit(state.config.beta2).powi(t);
    let cfg = state.config;
    for (p, mom) in params.iter_mut().zip(state.moments.iter_mut()) {
        if mom.m_w.len() != p.weight.len() || mom.m_b.len() != p.bias.len() {
            return config_err(format!("optimizer moments for {} have wrong shape", p.name));
        }
        let LayerParams {
            weight,
            bias,
            grad_weight,
            grad_bias,
            ..
        } = &mut **p;
        adamw_update(
            weight,
            grad_weight,
            &mut mom.m_w,
            &mut mom.v_w,
            &cfg,
            bias1,
            bias2,
        );
        adamw_update(
            bias,
            grad_bias,
            &mut mom.m_b,
            &mut mom.v_b,
            &cfg,
            bias1,
            bias2,
        );
    }
    Ok(())
}
