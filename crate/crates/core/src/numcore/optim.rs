use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Adam hyper-parameters. Weight decay is decoupled: it shrinks parameters
/// directly (`p -= lr·wd·p`) and never enters the moment estimates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Linear warmup length in steps; 0 means constant rate from step 1.
    pub warmup_steps: u64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            warmup_steps: 0,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid Adam settings: {self:?}")))
        }
    }

    /// Learning rate used for the update numbered `step` (1-based).
    pub fn rate_at(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 || step >= self.warmup_steps {
            self.learning_rate
        } else {
            self.learning_rate * step as f64 / self.warmup_steps as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step_count: u64,
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
    pub config: AdamConfig,
}

impl OptimizerState {
    pub fn new(params: &[Tensor], config: AdamConfig) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            step_count: 0,
            first_moment: zeros(),
            second_moment: zeros(),
            config,
        }
    }
}

/// One bias-corrected Adam update with decoupled weight decay.
pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], state: &mut OptimizerState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return Err(Error::Dimension {
            op: "adam_step",
            lhs: vec![params.len()],
            rhs: vec![grads.len(), state.first_moment.len()],
        });
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.first_moment) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(Error::Dimension {
                op: "adam_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
    }
    let cfg = state.config;
    let t = state.step_count + 1;
    let lr = cfg.rate_at(t);
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.first_moment[i].data_mut();
        let v = state.second_moment[i].data_mut();
        for (j, (pv, &gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gv;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gv * gv;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            *pv -= lr * cfg.weight_decay * *pv;
            *pv -= lr * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
    }
    state.step_count = t;
    Ok(())
}
