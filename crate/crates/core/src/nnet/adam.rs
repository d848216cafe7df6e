use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelWeights, Scalar};
use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub max_steps: usize,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            weight_decay: 1e-5,
            batch_size: 2,
            seed: 0,
            max_steps: 3000,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.weight_decay < 0.0 || self.batch_size == 0 {
            return Err(Error::Config(
                "learning_rate must be > 0, weight_decay >= 0, batch_size >= 1".into(),
            ));
        }
        self.model.validate()
    }
}

/// First/second moment estimates for every parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new<T: Scalar>(w: &ModelWeights<T>) -> Self {
        let zeros: Vec<Vec<f64>> = w.params().iter().map(|p| vec![0.0; p.data.len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One Adam update with decoupled weight decay:
/// `w <- w * (1 - lr * wd) - lr * m_hat / (sqrt(v_hat) + eps)`.
pub fn adam_step<T: Scalar>(
    w: &mut ModelWeights<T>,
    grads: &[Vec<T>],
    st: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<()> {
    if grads.len() != w.params().len() || st.m.len() != grads.len() {
        return Err(Error::shape("adam", "gradient/parameter count mismatch"));
    }
    st.step += 1;
    let t = st.step as i32;
    let bc1 = 1.0 - BETA1.powi(t);
    let bc2 = 1.0 - BETA2.powi(t);
    let lr = cfg.learning_rate;
    let decay = 1.0 - lr * cfg.weight_decay;
    for (i, p) in w.params_mut().iter_mut().enumerate() {
        let g = &grads[i];
        if g.len() != p.data.len() {
            return Err(Error::shape(&p.name, "gradient length mismatch"));
        }
        let (m, v) = (&mut st.m[i], &mut st.v[i]);
        for j in 0..g.len() {
            let gj = g[j].to_f64();
            m[j] = BETA1 * m[j] + (1.0 - BETA1) * gj;
            v[j] = BETA2 * v[j] + (1.0 - BETA2) * gj * gj;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            let wj = p.data[j].to_f64() * decay - lr * m_hat / (v_hat.sqrt() + EPSILON);
            p.data[j] = T::from_f64(wj);
        }
    }
    Ok(())
}
