//! AdamW with decoupled weight decay, and the one-cycle learning-rate
//! schedule.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::params::{Param, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamW {
    /// One update of a single parameter at 1-based `step`.
    pub fn step_param(&self, param: &mut Param, grad: &[f64], lr: f64, step: u64) -> Result<()> {
        if step == 0 {
            return Err(Error::invalid("adamw", "step counts from 1"));
        }
        if grad.len() != param.value.len() {
            return Err(Error::ShapeMismatch {
                op: "adamw",
                expected: vec![param.value.len()],
                found: vec![grad.len()],
            });
        }
        // Bias corrections from running products of the betas.
        let (p1, p2) = (0..step).fold((1.0, 1.0), |(a, b), _| (a * self.beta1, b * self.beta2));
        let (bc1, bc2) = (1.0 - p1, 1.0 - p2);
        let decay = 1.0 - lr * self.weight_decay;
        for i in 0..grad.len() {
            let g = grad[i];
            param.m[i] = self.beta1 * param.m[i] + (1.0 - self.beta1) * g;
            param.v[i] = self.beta2 * param.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = param.m[i] / bc1;
            let v_hat = param.v[i] / bc2;
            param.value[i] = param.value[i] * decay - lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }

    /// Updates every parameter that has a gradient. All gradients are
    /// checked before anything is modified.
    pub fn step(&self, store: &mut ParamStore, grads: &BTreeMap<String, Vec<f64>>, lr: f64, step: u64) -> Result<()> {
        for (name, g) in grads {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    op: "adamw gradient",
                });
            }
            store.get(name)?;
        }
        for (name, g) in grads {
            self.step_param(store.get_mut(name)?, g, lr, step)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OneCycle {
    pub lr_max: f64,
    pub pct_start: f64,
    pub div: f64,
    pub final_div: f64,
}

impl Default for OneCycle {
    fn default() -> Self {
        OneCycle {
            lr_max: 0.003,
            pct_start: 0.3,
            div: 25.0,
            final_div: 1e4,
        }
    }
}

fn cos_between(start: f64, end: f64, frac: f64) -> f64 {
    end + (start - end) * 0.5 * (1.0 + (PI * frac).cos())
}

impl OneCycle {
    /// Learning rate at `step` of `total` (both ends inclusive).
    pub fn lr(&self, step: usize, total: usize) -> Result<f64> {
        if total == 0 || step > total {
            return Err(Error::invalid("onecycle", format!("step {step} outside 0..={total}")));
        }
        let peak = self.pct_start * total as f64;
        let t = step as f64;
        Ok(if t <= peak {
            let frac = if peak > 0.0 { t / peak } else { 1.0 };
            cos_between(self.lr_max / self.div, self.lr_max, frac)
        } else {
            cos_between(self.lr_max, self.lr_max / self.final_div, (t - peak) / (total as f64 - peak))
        })
    }
}
