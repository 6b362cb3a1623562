//! Adam optimizer with optional global-norm gradient clipping.

use crate::tensor::Tensor;

use super::params::{ParamRef, ParamSet};

pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
    t: u64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: Some(10.0), t: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Apply one update from (param, gradient) pairs produced by a session.
    pub fn step(&mut self, params: &mut ParamSet, mut grads: Vec<(ParamRef, Tensor)>) {
        self.t += 1;
        if let Some(max_norm) = self.clip_norm {
            let total: f64 = grads
                .iter()
                .map(|(_, g)| g.data().iter().map(|v| v * v).sum::<f64>())
                .sum::<f64>()
                .sqrt();
            if total > max_norm {
                let scale = max_norm / total;
                for (_, g) in grads.iter_mut() {
                    for v in g.data_mut() {
                        *v *= scale;
                    }
                }
            }
        }
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (r, g) in grads {
            let entry = &mut params.entries[r.0];
            debug_assert!(entry.trainable);
            let n = entry.tensor.len();
            let m = entry.moment1.get_or_insert_with(|| vec![0.0; n]);
            let v = entry.moment2.get_or_insert_with(|| vec![0.0; n]);
            let data = entry.tensor.data_mut();
            for i in 0..n {
                let gi = g.data()[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}
