//! Polynomial learning-rate decay and AdamW with decoupled weight decay.

use panoseg_numerics::{Gradients, ParamStore};
use serde::{Deserialize, Serialize};

/// `lr0 * (1 - i / total)^power`, zero from `total` onwards.
pub fn poly_lr(i: usize, total: usize, lr0: f64, power: f64) -> f64 {
    if total == 0 || i >= total {
        return 0.0;
    }
    lr0 * (1.0 - i as f64 / total as f64).powf(power)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

#[derive(Clone, Debug)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

/// AdamW state. Moments are kept in `f64`; each parameter counts its own
/// steps, so parameters that skip a step keep correct bias correction.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    state: Vec<Option<Moments>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &ParamStore<f32>) -> Self {
        Self {
            config,
            state: vec![None; params.len()],
        }
    }

    /// Updates every trainable parameter that has a gradient. Frozen
    /// parameters and parameters without a gradient are left untouched.
    pub fn step(&mut self, params: &mut ParamStore<f32>, grads: &Gradients<f32>, lr: f64) {
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        for (id, g) in grads.iter() {
            let p = params.get_mut(id);
            if !p.trainable {
                continue;
            }
            let n = g.numel();
            let st = self.state[id.0].get_or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
                step: 0,
            });
            st.step += 1;
            let bc1 = 1.0 - beta1.powi(st.step as i32);
            let bc2 = 1.0 - beta2.powi(st.step as i32);
            let decay = 1.0 - lr * weight_decay;
            let data = p.tensor.data_mut();
            for i in 0..n {
                let gi = g.data()[i] as f64;
                st.m[i] = beta1 * st.m[i] + (1.0 - beta1) * gi;
                st.v[i] = beta2 * st.v[i] + (1.0 - beta2) * gi * gi;
                let mhat = st.m[i] / bc1;
                let vhat = st.v[i] / bc2;
                let w = data[i] as f64 * decay - lr * mhat / (vhat.sqrt() + eps);
                data[i] = w as f32;
            }
        }
    }
}
