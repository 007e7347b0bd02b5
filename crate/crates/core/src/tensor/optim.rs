use serde::{Deserialize, Serialize};

use super::{Gradients, ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl AdamState {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros = || store.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        AdamState {
            config,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }
}

/// One bias-corrected Adam update of every parameter.
pub fn adam_step(store: &mut ParamStore, grads: &Gradients, state: &mut AdamState) {
    state.step += 1;
    let AdamConfig {
        lr,
        beta1,
        beta2,
        eps,
    } = state.config;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for (id, g) in grads.iter() {
        let m = state.first[id.index()].data_mut();
        let v = state.second[id.index()].data_mut();
        let p = store.get_mut(id).data_mut();
        for i in 0..p.len() {
            let gi = g.data()[i];
            m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
            v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            p[i] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::row(vec![0.3, -1.2])).unwrap();
        let before = store.clone();
        let mut state = AdamState::new(&store, AdamConfig::default());
        let grads = Gradients::zeros_like(&store);
        for _ in 0..5 {
            adam_step(&mut store, &grads, &mut state);
        }
        assert_eq!(store, before);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::scalar(0.0)).unwrap();
        let mut state = AdamState::new(
            &store,
            AdamConfig {
                lr: 0.1,
                ..AdamConfig::default()
            },
        );
        let mut grads = Gradients::zeros_like(&store);
        grads.accumulate(w, &[1.0]);
        adam_step(&mut store, &grads, &mut state);
        let p = store.get(w).data()[0];
        assert!((p + 0.1).abs() < 1e-8, "{p}");
    }

    #[test]
    fn trajectories_are_reproducible() {
        let run = || {
            let mut store = ParamStore::new();
            let w = store.add("w", Tensor::row(vec![1.0, 2.0])).unwrap();
            let mut state = AdamState::new(&store, AdamConfig::default());
            for k in 0..10 {
                let mut g = Gradients::zeros_like(&store);
                g.accumulate(w, &[k as f64 * 0.1, -0.5]);
                adam_step(&mut store, &g, &mut state);
            }
            store
        };
        assert_eq!(run(), run());
    }
}
