use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{AutodiffError, Gradients, ParamId, ParamStore, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub warmup_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            warmup_steps: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam with bias correction and a linear warmup ramp.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    moments: BTreeMap<ParamId, (Tensor<f64>, Tensor<f64>)>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Completed update count.
    pub fn step(&self) -> u64 {
        self.step
    }

    /// Learning rate applied by the next call to [`Adam::update`].
    pub fn effective_lr(&self) -> f64 {
        let c = &self.config;
        if c.warmup_steps == 0 {
            c.learning_rate
        } else {
            c.learning_rate * (self.step as f64 / c.warmup_steps as f64).min(1.0)
        }
    }

    pub fn moments(&self, id: ParamId) -> Option<&(Tensor<f64>, Tensor<f64>)> {
        self.moments.get(&id)
    }

    /// One Adam update of every parameter present in `grads`.
    pub fn update(&mut self, params: &mut ParamStore<f32>, grads: &Gradients<f32>) -> Result<(), AutodiffError> {
        for (id, g) in grads.iter() {
            if !g.is_finite() {
                return Err(AutodiffError::NonFiniteGradient {
                    param: params.name(*id).to_string(),
                });
            }
            if g.shape() != params.get(*id).shape() {
                return Err(AutodiffError::ShapeMismatch {
                    op: "adam_step",
                    lhs: params.get(*id).shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
        }
        let lr = self.effective_lr();
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (id, g) in grads.iter() {
            let p = params.get_mut(*id);
            let (m, v) = self
                .moments
                .entry(*id)
                .or_insert_with(|| (Tensor::zeros(p.shape()), Tensor::zeros(p.shape())));
            for (((pv, gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let gv = *gv as f64;
                *mv = c.beta1 * *mv + (1.0 - c.beta1) * gv;
                *vv = c.beta2 * *vv + (1.0 - c.beta2) * gv * gv;
                if lr == 0.0 {
                    continue;
                }
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                let delta = lr * mhat / (vhat.sqrt() + c.epsilon);
                if delta != 0.0 {
                    *pv = (*pv as f64 - delta) as f32;
                }
            }
        }
        Ok(())
    }
}
