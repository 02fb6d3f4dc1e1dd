//! Adam with decoupled weight decay (AdamW).

use super::{Gradients, ParamStore};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// First/second moment buffers for every parameter of a store.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = store.entries().iter().map(|e| vec![0.0; e.tensor.len()]).collect();
        AdamState {
            config,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One AdamW update of every trainable parameter.
///
/// Weight decay is applied to the parameter directly (`p -= lr * wd * p`)
/// before the bias-corrected moment step.
pub fn adam_step(store: &mut ParamStore, grads: &Gradients, state: &mut AdamState) -> Result<()> {
    if state.m.len() != store.len() {
        return Err(Error::dim("adam_step", "optimizer state does not match the parameter store"));
    }
    for id in store.ids() {
        if !store.is_trainable(id) {
            continue;
        }
        let g = grads
            .get(id)
            .ok_or_else(|| Error::MissingGrad(store.name(id).to_string()))?;
        if g.len() != store.get(id).len() {
            return Err(Error::dim(
                "adam_step",
                format!("gradient for `{}` has {} entries, parameter has {}", store.name(id), g.len(), store.get(id).len()),
            ));
        }
    }

    state.t += 1;
    let AdamConfig {
        lr,
        beta1,
        beta2,
        eps,
        weight_decay,
    } = state.config;
    let bc1 = 1.0 - beta1.powi(state.t as i32);
    let bc2 = 1.0 - beta2.powi(state.t as i32);
    let decay = 1.0 - lr * weight_decay;

    let ids: Vec<_> = store.ids().filter(|&id| store.is_trainable(id)).collect();
    for id in ids {
        let g = grads.get(id).expect("checked above");
        let m = &mut state.m[id.index()];
        let v = &mut state.v[id.index()];
        let p = store.get_mut(id).data_mut();
        for i in 0..p.len() {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            p[i] = p[i] * decay - lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn single(value: f64) -> (ParamStore, crate::tensor::ParamId) {
        let mut s = ParamStore::new();
        let id = s.insert("p", Tensor::scalar(value), true).unwrap();
        (s, id)
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let (mut s, id) = single(0.0);
        let mut st = AdamState::new(
            &s,
            AdamConfig {
                weight_decay: 0.0,
                ..Default::default()
            },
        );
        let mut g = Gradients::empty(&s);
        g.set(id, vec![1.0]);
        adam_step(&mut s, &g, &mut st).unwrap();
        let p = s.get(id).data()[0];
        assert!((p + 1e-3).abs() < 1e-10, "{p}");
        assert_eq!(st.t, 1);
    }

    #[test]
    fn zero_grad_without_decay_is_a_no_op() {
        let (mut s, id) = single(0.7);
        let mut st = AdamState::new(
            &s,
            AdamConfig {
                weight_decay: 0.0,
                ..Default::default()
            },
        );
        let g = Gradients::zeros_for_trainable(&s);
        adam_step(&mut s, &g, &mut st).unwrap();
        assert_eq!(s.get(id).data()[0], 0.7);
    }

    #[test]
    fn decoupled_decay_scales_parameter() {
        let (mut s, id) = single(2.0);
        let mut st = AdamState::new(&s, AdamConfig::default());
        let g = Gradients::zeros_for_trainable(&s);
        adam_step(&mut s, &g, &mut st).unwrap();
        assert_eq!(s.get(id).data()[0], 2.0 * (1.0 - 1e-3 * 1e-4));
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let (mut s, _) = single(1.0);
        let mut st = AdamState::new(&s, AdamConfig::default());
        let g = Gradients::empty(&s);
        assert!(matches!(adam_step(&mut s, &g, &mut st), Err(Error::MissingGrad(_))));
        assert_eq!(st.t, 0);
    }

    #[test]
    fn frozen_parameters_are_left_alone() {
        let mut s = ParamStore::new();
        let id = s.insert("frozen", Tensor::scalar(3.0), false).unwrap();
        let mut st = AdamState::new(&s, AdamConfig::default());
        let g = Gradients::empty(&s);
        adam_step(&mut s, &g, &mut st).unwrap();
        assert_eq!(s.get(id).data()[0], 3.0);
    }
}
