use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub max_grad_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 4e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, max_grad_norm: None }
    }
}

/// Bias-corrected Adam with per-parameter moment buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        Adam { config, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update in place. Rejects the whole step, leaving
    /// parameters and moments untouched, if any gradient is NaN.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Vec<f64>]) -> Result<()> {
        if grads.len() != store.len() || grads.iter().zip(&self.m).any(|(g, m)| g.len() != m.len()) {
            return Err(Error::Shape("gradient buffers do not match parameters".into()));
        }
        if grads.iter().flatten().any(|g| g.is_nan()) {
            return Err(Error::NonFinite("NaN gradient; update rejected".into()));
        }
        let mut clip = 1.0;
        if let Some(max_norm) = self.config.max_grad_norm {
            let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
            if norm > max_norm {
                clip = max_norm / norm;
            }
        }
        let AdamConfig { lr, beta1, beta2, eps, .. } = self.config;
        self.step += 1;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (k, t) in store.tensors_mut().iter_mut().enumerate() {
            let (m, v, g) = (&mut self.m[k], &mut self.v[k], &grads[k]);
            for (i, p) in t.values_mut().iter_mut().enumerate() {
                let gi = g[i] * clip;
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Moment buffers and step counter as named tensors under `prefix`.
    pub fn named(&self, prefix: &str, store: &ParamStore) -> Vec<(String, Tensor)> {
        let mut out = vec![(format!("{prefix}.step"), Tensor::scalar(self.step as f64))];
        for (k, (name, t)) in store.iter().enumerate() {
            let shape = t.shape().to_vec();
            out.push((format!("{prefix}.m.{name}"), Tensor::new(shape.clone(), self.m[k].clone()).unwrap()));
            out.push((format!("{prefix}.v.{name}"), Tensor::new(shape, self.v[k].clone()).unwrap()));
        }
        out
    }

    pub fn load_named(&mut self, prefix: &str, store: &ParamStore, entries: &BTreeMap<String, Tensor>) -> Result<()> {
        let get = |key: String| entries.get(&key).ok_or_else(|| Error::Checkpoint(format!("missing tensor {key}")));
        self.step = get(format!("{prefix}.step"))?.item() as u64;
        for (k, (name, t)) in store.iter().enumerate() {
            let m = get(format!("{prefix}.m.{name}"))?;
            let v = get(format!("{prefix}.v.{name}"))?;
            if m.shape() != t.shape() || v.shape() != t.shape() {
                return Err(Error::Checkpoint(format!("optimizer moments for {name} have wrong shape")));
            }
            self.m[k] = m.values().to_vec();
            self.v[k] = v.values().to_vec();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Tensor::vector(vec![v])).unwrap();
        s
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut store = scalar_store(0.7);
        let mut adam = Adam::new(AdamConfig::default(), &store);
        for _ in 0..5 {
            adam.step(&mut store, &[vec![0.0]]).unwrap();
        }
        assert_eq!(store.tensors()[0].values(), &[0.7]);
        assert_eq!(adam.steps_taken(), 5);
    }

    #[test]
    fn single_step_matches_hand_evaluation() {
        let mut store = scalar_store(1.0);
        let cfg = AdamConfig::default();
        let mut adam = Adam::new(cfg, &store);
        adam.step(&mut store, &[vec![1.0]]).unwrap();
        // m = 0.1, v = 0.001; bias corrections divide both back to 1
        let m_hat = 0.1 / (1.0 - 0.9);
        let v_hat = 0.001 / (1.0 - 0.999);
        let expected = 1.0 - 4e-4 * m_hat / (f64::sqrt(v_hat) + 1e-8);
        let got = store.tensors()[0].values()[0];
        assert!((got - expected).abs() < 1e-16, "{got} vs {expected}");
        assert!(((1.0 - got) - 4e-4 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn first_step_moves_against_gradient() {
        for g in [-3.0, -1e-3, 2e-6, 5.0] {
            let mut store = scalar_store(0.0);
            let mut adam = Adam::new(AdamConfig::default(), &store);
            adam.step(&mut store, &[vec![g]]).unwrap();
            let delta = store.tensors()[0].values()[0];
            assert_eq!(delta.signum(), -g.signum());
        }
    }

    #[test]
    fn nan_gradient_rejected_without_mutation() {
        let mut store = scalar_store(0.5);
        let mut adam = Adam::new(AdamConfig::default(), &store);
        let before = adam.clone();
        assert!(matches!(adam.step(&mut store, &[vec![f64::NAN]]), Err(Error::NonFinite(_))));
        assert_eq!(store.tensors()[0].values(), &[0.5]);
        assert_eq!(adam, before);
    }

    #[test]
    fn deterministic_updates() {
        let run = || {
            let mut store = scalar_store(0.3);
            let mut adam = Adam::new(AdamConfig::default(), &store);
            for k in 0..10 {
                adam.step(&mut store, &[vec![(k as f64 * 0.7).sin()]]).unwrap();
            }
            store.tensors()[0].values()[0].to_bits()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn clipping_bounds_gradient_norm() {
        let mut store = scalar_store(0.0);
        let cfg = AdamConfig { max_grad_norm: Some(1.0), ..AdamConfig::default() };
        let mut adam = Adam::new(cfg, &store);
        adam.step(&mut store, &[vec![100.0]]).unwrap();
        // first moment after clipping is 0.1 * 1.0
        let named = adam.named("opt", &store);
        let m = named.iter().find(|(n, _)| n == "opt.m.w").unwrap().1.values()[0];
        assert!((m - 0.1).abs() < 1e-15);
    }

    #[test]
    fn state_round_trips_through_named_tensors() {
        let mut store = scalar_store(0.3);
        let mut adam = Adam::new(AdamConfig::default(), &store);
        adam.step(&mut store, &[vec![0.4]]).unwrap();
        let entries: BTreeMap<_, _> = adam.named("opt", &store).into_iter().collect();
        let mut fresh = Adam::new(AdamConfig::default(), &store);
        fresh.load_named("opt", &store, &entries).unwrap();
        assert_eq!(fresh, adam);
    }
}
