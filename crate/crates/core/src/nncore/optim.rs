use serde::{Deserialize, Serialize};

use super::{NnError, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment buffers, aligned with the store's parameter order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

/// Bias-corrected Adam. Frozen parameters are left untouched.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub state: AdamState,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        Self {
            config,
            state: AdamState {
                step: 0,
                m: store.zeros_like(),
                v: store.zeros_like(),
            },
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) -> Result<(), NnError> {
        if grads.len() != store.len() || self.state.m.len() != store.len() {
            return Err(NnError::Invalid(format!(
                "adam: {} gradients / {} moments for {} parameters",
                grads.len(),
                self.state.m.len(),
                store.len()
            )));
        }
        for ((_, p), g) in store.iter().zip(grads) {
            if p.trainable && !g.is_finite() {
                return Err(NnError::NonFiniteGradient(p.name.clone()));
            }
        }
        self.state.step += 1;
        let t = self.state.step as i32;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let ids: Vec<_> = store.iter().map(|(id, p)| (id, p.trainable)).collect();
        for (i, (id, trainable)) in ids.into_iter().enumerate() {
            if !trainable {
                continue;
            }
            let m = self.state.m[i].data_mut();
            let v = self.state.v[i].data_mut();
            let w = store.value_mut(id).data_mut();
            for (((w, m), v), g) in w.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(grads[i].data()) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let mh = *m / c1;
                let vh = *v / c2;
                *w -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let k = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= k);
        }
    }
    norm
}
