use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::numerics::Tensor;

/// Linear warmup to `lr` over the first `ceil(warmup_fraction * total)`
/// steps, constant afterwards.
pub fn lr_at(step: usize, total_steps: usize, config: &TrainConfig) -> f64 {
    let warmup = (config.warmup_fraction * total_steps as f64).ceil() as usize;
    if warmup > 0 && step < warmup {
        config.lr * step as f64 / warmup as f64
    } else {
        config.lr
    }
}

/// Per-tensor first/second moment accumulators.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub t: usize,
    pub moments: BTreeMap<String, (Vec<f32>, Vec<f32>)>,
}

/// Adam over named f32 tensors; consumes and clears each tensor's `grad`.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub state: AdamState,
}

impl Adam {
    pub fn new(config: &TrainConfig) -> Self {
        Adam {
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.adam_eps,
            state: AdamState::default(),
        }
    }

    pub fn from_state(config: &TrainConfig, state: AdamState) -> Self {
        Adam { beta1: config.beta1, beta2: config.beta2, eps: config.adam_eps, state }
    }

    /// One update over `(name, tensor)` pairs whose `grad` is populated.
    pub fn step<'a>(
        &mut self,
        params: impl Iterator<Item = (String, &'a mut Tensor<f32>)>,
        lr: f64,
    ) {
        self.state.t += 1;
        let t = self.state.t as i32;
        let b1 = self.beta1;
        let b2 = self.beta2;
        let bias1 = 1.0 - b1.powi(t);
        let bias2 = 1.0 - b2.powi(t);
        for (name, tensor) in params {
            let Some(grad) = tensor.grad.take() else { continue };
            let n = tensor.numel();
            let (m, v) = self
                .state
                .moments
                .entry(name)
                .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            let data = tensor.data_mut();
            for i in 0..n {
                let g = grad[i] as f64;
                let mi = b1 * m[i] as f64 + (1.0 - b1) * g;
                let vi = b2 * v[i] as f64 + (1.0 - b2) * g * g;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let m_hat = mi / bias1;
                let v_hat = vi / bias2;
                data[i] -= (lr * m_hat / (v_hat.sqrt() + self.eps)) as f32;
            }
        }
    }
}
