//! Adam with per-parameter bias correction, plus global-norm clipping.

use std::collections::HashMap;

use crate::params::{ParamId, ParamStore};
use crate::tensor::{Float, Result, TensorError};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moments and step count for one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments<F> {
    pub m: Vec<F>,
    pub v: Vec<F>,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam<F> {
    pub config: AdamConfig,
    /// Number of `step` calls.
    pub steps: u64,
    pub state: Vec<Moments<F>>,
}

impl<F: Float> Adam<F> {
    pub fn new(config: AdamConfig, store: &ParamStore<F>) -> Self {
        let state = store
            .iter()
            .map(|(_, e)| Moments {
                m: vec![F::zero(); e.value.numel()],
                v: vec![F::zero(); e.value.numel()],
                step: 0,
            })
            .collect();
        Self {
            config,
            steps: 0,
            state,
        }
    }

    /// Applies one update to every parameter in `trainable`. Each must have a
    /// gradient in `grads`.
    pub fn step(
        &mut self,
        store: &mut ParamStore<F>,
        grads: &HashMap<ParamId, Vec<F>>,
        trainable: &[ParamId],
    ) -> Result<()> {
        for &id in trainable {
            if !grads.contains_key(&id) {
                return Err(TensorError::Usage(format!(
                    "no gradient for trainable parameter {}",
                    store.name(id)
                )));
            }
        }
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        for &id in trainable {
            let g = &grads[&id];
            let st = &mut self.state[id.index()];
            if g.len() != st.m.len() {
                return Err(TensorError::Shape {
                    op: "adam",
                    lhs: vec![st.m.len()],
                    rhs: vec![g.len()],
                });
            }
            st.step += 1;
            let bc1 = 1.0 - beta1.powi(st.step as i32);
            let bc2 = 1.0 - beta2.powi(st.step as i32);
            let (b1, b2) = (F::lit(beta1), F::lit(beta2));
            let (one_b1, one_b2) = (F::lit(1.0 - beta1), F::lit(1.0 - beta2));
            let step_size = F::lit(lr / bc1);
            let bc2_sqrt = F::lit(bc2.sqrt());
            let eps = F::lit(eps);
            let p = store.get_mut(id).data_mut();
            for i in 0..p.len() {
                st.m[i] = b1 * st.m[i] + one_b1 * g[i];
                st.v[i] = b2 * st.v[i] + one_b2 * g[i] * g[i];
                let denom = st.v[i].sqrt() / bc2_sqrt + eps;
                p[i] -= step_size * st.m[i] / denom;
            }
        }
        self.steps += 1;
        Ok(())
    }
}

/// Rescales the gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<F: Float>(grads: &mut HashMap<ParamId, Vec<F>>, max_norm: f64) -> f64 {
    let mut ids: Vec<ParamId> = grads.keys().copied().collect();
    ids.sort();
    let norm = ids
        .iter()
        .flat_map(|id| grads[id].iter())
        .map(|g| g.as_f64() * g.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = F::lit(max_norm / norm);
        for g in grads.values_mut() {
            for e in g.iter_mut() {
                *e *= s;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store_with(values: &[f64]) -> (ParamStore<f64>, ParamId) {
        let mut s = ParamStore::new();
        let id = s.insert("p.x", Tensor::from_f64(vec![values.len()], values).unwrap());
        (s, id)
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let (mut store, id) = store_with(&[1.0, -2.0, 0.5]);
        let mut adam = Adam::new(AdamConfig { lr: 0.01, ..Default::default() }, &store);
        let grads = HashMap::from([(id, vec![3.0, -0.2, 1e-3])]);
        adam.step(&mut store, &grads, &[id]).unwrap();
        let p = store.get(id).data();
        assert!((p[0] - 0.99).abs() < 1e-6);
        assert!((p[1] + 1.99).abs() < 1e-6);
        assert!((p[2] - 0.49).abs() < 1e-4);
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let (mut store, id) = store_with(&[1.0, 2.0]);
        let mut adam = Adam::new(AdamConfig::default(), &store);
        let grads = HashMap::from([(id, vec![0.0, 0.0])]);
        adam.step(&mut store, &grads, &[id]).unwrap();
        assert_eq!(store.get(id).data(), &[1.0, 2.0]);
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let (mut store, id) = store_with(&[0.3, -0.7]);
        let mut adam = Adam::new(AdamConfig { lr: 0.0, ..Default::default() }, &store);
        for _ in 0..3 {
            let grads = HashMap::from([(id, vec![1.5, -4.0])]);
            adam.step(&mut store, &grads, &[id]).unwrap();
        }
        assert_eq!(store.get(id).data(), &[0.3, -0.7]);
    }

    #[test]
    fn two_steps_decrease_a_quadratic() {
        let (mut store, id) = store_with(&[3.0]);
        let mut adam = Adam::new(AdamConfig { lr: 0.1, ..Default::default() }, &store);
        let f = |x: f64| (x - 1.0) * (x - 1.0);
        let mut prev = f(store.get(id).data()[0]);
        for _ in 0..2 {
            let x = store.get(id).data()[0];
            let grads = HashMap::from([(id, vec![2.0 * (x - 1.0)])]);
            adam.step(&mut store, &grads, &[id]).unwrap();
            let now = f(store.get(id).data()[0]);
            assert!(now < prev);
            prev = now;
        }
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let (mut store, id) = store_with(&[1.0]);
        let mut adam = Adam::new(AdamConfig::default(), &store);
        let err = adam.step(&mut store, &HashMap::new(), &[id]).unwrap_err();
        assert!(matches!(err, TensorError::Usage(_)));
    }

    #[test]
    fn clipping_bounds_the_global_norm() {
        let (_, id) = store_with(&[0.0, 0.0]);
        let mut grads = HashMap::from([(id, vec![3.0f64, 4.0])]);
        let before = clip_global_norm(&mut grads, 1.0);
        assert!((before - 5.0).abs() < 1e-12);
        assert!((grads[&id][0] - 0.6).abs() < 1e-12);
        let mut small = HashMap::from([(id, vec![0.3f64, 0.4])]);
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[&id], vec![0.3, 0.4]);
    }
}
