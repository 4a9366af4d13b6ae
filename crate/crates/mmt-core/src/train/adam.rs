//! Adam with bias correction and an inverse-square-root schedule with linear
//! warmup. Update arithmetic runs in f64; storage stays f32.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub warmup_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 5e-4,
            warmup_steps: 2000,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            weight_decay: 0.0,
        }
    }
}

/// Peak-lr inverse-sqrt schedule: linear ramp over `warmup` steps, then
/// decay by sqrt(warmup/step). Steps count from 1; step == warmup hits peak.
pub fn lr_at(cfg: &AdamConfig, step: u64) -> f64 {
    let step = step.max(1) as f64;
    let warmup = cfg.warmup_steps.max(1) as f64;
    cfg.lr * (step / warmup).min((warmup / step).sqrt())
}

/// Per-parameter first/second moments, aligned with the trainer's parameter
/// order.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(sizes: &[usize]) -> Self {
        OptimizerState {
            m: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            v: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            step: 0,
        }
    }

    pub fn matches(&self, sizes: &[usize]) -> bool {
        self.m.len() == sizes.len()
            && self.m.iter().zip(sizes).all(|(m, &s)| m.len() == s)
    }
}

/// One Adam step over `params` (tape nodes) at learning rate `lr`.
/// Missing gradients are treated as zero. Weight decay is classic L2 added
/// to the gradient.
pub fn adam_update(
    tape: &mut Tape,
    params: &[Var],
    state: &mut OptimizerState,
    cfg: &AdamConfig,
    lr: f64,
) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(Error::Shape(format!(
            "optimizer state tracks {} tensors, model has {}",
            state.m.len(),
            params.len()
        )));
    }
    state.step += 1;
    let t = state.step;
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for (i, &p) in params.iter().enumerate() {
        let numel = tape.data(p).len();
        if state.m[i].len() != numel {
            return Err(Error::Shape(format!(
                "optimizer moment {i} has {} entries, parameter has {numel}",
                state.m[i].len()
            )));
        }
        let grad: Option<Vec<f32>> = tape.grad(p).map(|g| g.to_vec());
        let data = tape.data_mut(p);
        let (ms, vs) = (&mut state.m[i], &mut state.v[i]);
        for j in 0..numel {
            let g = grad.as_ref().map_or(0.0, |g| f64::from(g[j]))
                + cfg.weight_decay * f64::from(data[j]);
            let m = cfg.beta1 * f64::from(ms[j]) + (1.0 - cfg.beta1) * g;
            let v = cfg.beta2 * f64::from(vs[j]) + (1.0 - cfg.beta2) * g * g;
            ms[j] = m as f32;
            vs[j] = v as f32;
            let m_hat = m / bc1;
            let v_hat = v / bc2;
            data[j] = (f64::from(data[j]) - lr * m_hat / (v_hat.sqrt() + cfg.eps)) as f32;
        }
    }
    Ok(())
}
