use serde::{Deserialize, Serialize};

use super::params::{Grads, ParamGroup, ParamStore};
use super::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moments aligned with a parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = || {
            store
                .params
                .iter()
                .map(|p| vec![T::zero(); p.data.len()])
                .collect()
        };
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One bias-corrected Adam update. Parameters whose group is not in
/// `trainable`, and batch-norm running statistics, are not touched.
pub fn adam_step<T: Real>(
    store: &mut ParamStore<T>,
    grads: &Grads<T>,
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
    trainable: &[ParamGroup],
) {
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let one = T::one();
    let c1 = T::of(1.0 - cfg.beta1.powi(t));
    let c2 = T::of(1.0 - cfg.beta2.powi(t));
    let lr = T::of(cfg.learning_rate);
    let eps = T::of(cfg.epsilon);
    for (i, p) in store.params.iter_mut().enumerate() {
        if !p.kind.is_learnable() || !trainable.contains(&p.group) {
            continue;
        }
        let (m, v, g) = (&mut state.m[i], &mut state.v[i], &grads.values[i]);
        for (k, w) in p.data.iter_mut().enumerate() {
            m[k] = b1 * m[k] + (one - b1) * g[k];
            v[k] = b2 * v[k] + (one - b2) * g[k] * g[k];
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::ParamKind;

    fn store() -> ParamStore<f64> {
        let mut s = ParamStore::default();
        s.add(
            "w",
            ParamGroup::Soiling,
            ParamKind::Weight,
            vec![1],
            vec![0.5],
        );
        s.add(
            "e",
            ParamGroup::Encoder,
            ParamKind::Weight,
            vec![2],
            vec![1.0, -2.0],
        );
        s.add(
            "rm",
            ParamGroup::Soiling,
            ParamKind::RunningMean,
            vec![1],
            vec![0.0],
        );
        s
    }

    #[test]
    fn zero_gradient_keeps_parameters() {
        let mut s = store();
        let before = s.clone();
        let mut state = AdamState::new(&s);
        let g = Grads::zeros_like(&s);
        adam_step(
            &mut s,
            &g,
            &mut state,
            &AdamConfig::default(),
            &ParamGroup::ALL,
        );
        assert_eq!(s, before);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut s = store();
        let mut state = AdamState::new(&s);
        let mut g = Grads::zeros_like(&s);
        g.values[0][0] = 1.0;
        adam_step(
            &mut s,
            &g,
            &mut state,
            &AdamConfig::default(),
            &ParamGroup::ALL,
        );
        assert!((s.params[0].data[0] - (0.5 - 0.001)).abs() < 1e-10);
    }

    #[test]
    fn frozen_group_and_running_stats_are_bitwise_unchanged() {
        let mut s = store();
        let before = s.clone();
        let mut state = AdamState::new(&s);
        let mut g = Grads::zeros_like(&s);
        g.values.iter_mut().flatten().for_each(|v| *v = 3.0);
        for _ in 0..5 {
            adam_step(
                &mut s,
                &g,
                &mut state,
                &AdamConfig::default(),
                &[ParamGroup::Soiling],
            );
        }
        assert_eq!(s.params[1], before.params[1]);
        assert_eq!(s.params[2], before.params[2]);
        assert_ne!(s.params[0], before.params[0]);
    }
}
