//! Adam with bias correction and the polynomial ("poly") learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment buffers and step counter for one [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub lr: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore, lr: f64, config: AdamConfig) -> Self {
        let zeros = || store.values().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            config,
            lr,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update of every parameter in `store` using `grads` (same order).
pub fn adam_step(store: &mut ParamStore, grads: &[Tensor], state: &mut AdamState) -> Result<()> {
    if grads.len() != store.len() || state.first.len() != store.len() {
        return Err(Error::ShapeMismatch {
            op: "adam_step",
            left: vec![store.len()],
            right: vec![grads.len()],
        });
    }
    for (id, g) in store.ids().zip(grads) {
        if g.shape() != store.get(id).shape() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                left: store.get(id).shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
        if !g.all_finite() {
            return Err(Error::NonFiniteGradient(store.name(id).to_string()));
        }
    }
    state.step += 1;
    let AdamConfig { beta1, beta2, eps } = state.config;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for (k, (id, g)) in store.ids().zip(grads).enumerate() {
        let m = &mut state.first[k];
        let v = &mut state.second[k];
        let p = store.get_mut(id).data_mut();
        for i in 0..p.len() {
            let gi = g.data()[i];
            m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
            v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= state.lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// `base * (1 - step / total)^power`, floored at zero.
pub fn poly_lr(base: f64, step: usize, total: usize, power: f64) -> f64 {
    if total == 0 {
        return base;
    }
    let frac = (1.0 - step as f64 / total as f64).max(0.0);
    base * frac.powf(power)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("x", Tensor::new(vec![1], vec![v]).unwrap()).unwrap();
        s
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut s = scalar_store(0.7);
        let mut st = AdamState::new(&s, 0.1, AdamConfig::default());
        adam_step(&mut s, &[Tensor::zeros(&[1])], &mut st).unwrap();
        assert_eq!(s.values()[0].data(), &[0.7]);
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m̂ = v̂ = 1 after bias correction, so the step is lr / (1 + eps).
        let mut s = scalar_store(1.0);
        let mut st = AdamState::new(&s, 0.1, AdamConfig::default());
        adam_step(&mut s, &[Tensor::full(&[1], 1.0)], &mut st).unwrap();
        let expected = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((s.values()[0].data()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut s = scalar_store(1.0);
        let mut st = AdamState::new(&s, 0.1, AdamConfig::default());
        let err = adam_step(&mut s, &[Tensor::full(&[1], f64::NAN)], &mut st).unwrap_err();
        assert!(err.to_string().contains("`x`"));
        assert_eq!(st.step_count(), 0);
    }

    #[test]
    fn repeated_runs_are_bitwise_identical() {
        let run = || {
            let mut s = scalar_store(0.3);
            let mut st = AdamState::new(&s, 0.05, AdamConfig::default());
            for k in 0..20 {
                let g = Tensor::full(&[1], (k as f64 * 0.7).cos());
                adam_step(&mut s, &[g], &mut st).unwrap();
            }
            s.values()[0].data()[0].to_bits()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn poly_schedule_endpoints() {
        assert_eq!(poly_lr(1e-3, 0, 100, 0.9), 1e-3);
        assert_eq!(poly_lr(1e-3, 100, 100, 0.9), 0.0);
        assert!((poly_lr(1.0, 50, 100, 1.0) - 0.5).abs() < 1e-15);
    }
}
