//! Adam with the AMSGrad running maximum.
//!
//! With `g` the loss gradient at step `t`:
//!
//! ```text
//! m ← β1·m + (1 − β1)·g
//! v ← β2·v + (1 − β2)·g²
//! v̂ ← max(v̂, v)
//! p ← p − lr · (m / (1 − β1^t)) / (sqrt(v̂) / sqrt(1 − β2^t) + ε)
//! ```
//!
//! Both moments are bias-corrected, so the first step of a fresh state
//! moves each coordinate by about `lr`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
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

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub t: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
    pub vhat: BTreeMap<String, Tensor>,
}

impl OptimizerState {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let zeros = || -> BTreeMap<String, Tensor> {
            params.iter().map(|(n, t)| (n.clone(), Tensor::zeros(t.shape()))).collect()
        };
        OptimizerState {
            config,
            t: 0,
            m: zeros(),
            v: zeros(),
            vhat: zeros(),
        }
    }

    /// One descent step on `params` along the loss gradients `grads`.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        if grads.len() != params.len() || grads.keys().zip(params.names()).any(|(a, b)| a != b) {
            return Err(Error::Contract("gradient keys do not match parameter names".into()));
        }
        for (name, g) in grads {
            let p = params.get(name).expect("checked above");
            if p.shape() != g.shape() || self.m.get(name).map(Tensor::shape) != Some(p.shape()) {
                return Err(Error::shapes(name, p.shape(), g.shape()));
            }
        }
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powf(self.t as f64);
        let bc2_sqrt = (1.0 - beta2.powf(self.t as f64)).sqrt();
        for ((name, p), g) in params.iter_mut().zip(grads.values()) {
            let m = self.m.get_mut(name).unwrap().data_mut();
            let v = self.v.get_mut(name).unwrap().data_mut();
            let vh = self.vhat.get_mut(name).unwrap().data_mut();
            for i in 0..g.len() {
                let gi = g.data()[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                vh[i] = vh[i].max(v[i]);
                let denom = vh[i].sqrt() / bc2_sqrt + eps;
                p.data_mut()[i] -= lr * (m[i] / bc1) / denom;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(x: f64) -> ParamStore {
        let mut p = ParamStore::new();
        p.insert("p", Tensor::scalar(x)).unwrap();
        p
    }

    fn grad(g: f64) -> BTreeMap<String, Tensor> {
        BTreeMap::from([("p".to_string(), Tensor::scalar(g))])
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = scalar_store(1.5);
        let mut s = OptimizerState::new(AdamConfig::default(), &p);
        s.step(&mut p, &grad(0.0)).unwrap();
        assert_eq!(p.get("p").unwrap().item(), 1.5);
    }

    #[test]
    fn first_update_is_about_lr() {
        let mut p = scalar_store(0.0);
        let mut s = OptimizerState::new(AdamConfig::default(), &p);
        s.step(&mut p, &grad(1.0)).unwrap();
        // m̂ = 1, sqrt(v̂)/sqrt(1 − β2) = 1, so the step is lr/(1 + ε)
        let expected = -1e-3 / (1.0 + 1e-8);
        assert!((p.get("p").unwrap().item() - expected).abs() < 1e-15);
    }

    #[test]
    fn repeated_gradient_does_not_grow_update() {
        let mut p = scalar_store(0.0);
        let mut s = OptimizerState::new(AdamConfig::default(), &p);
        s.step(&mut p, &grad(1.0)).unwrap();
        let u1 = p.get("p").unwrap().item().abs();
        s.step(&mut p, &grad(1.0)).unwrap();
        let u2 = p.get("p").unwrap().item().abs() - u1;
        assert!(u2 <= u1 + 1e-12);
    }

    #[test]
    fn vhat_is_monotone() {
        let mut p = scalar_store(0.0);
        let mut s = OptimizerState::new(AdamConfig::default(), &p);
        let mut last = 0.0;
        for g in [3.0, 0.1, 0.0, 2.0, 0.01] {
            s.step(&mut p, &grad(g)).unwrap();
            let vh = s.vhat["p"].item();
            assert!(vh >= last && vh >= s.v["p"].item());
            last = vh;
        }
        assert_eq!(s.t, 5);
    }

    #[test]
    fn key_mismatch_is_rejected() {
        let mut p = scalar_store(0.0);
        let mut s = OptimizerState::new(AdamConfig::default(), &p);
        let g = BTreeMap::from([("q".to_string(), Tensor::scalar(1.0))]);
        assert!(matches!(s.step(&mut p, &g), Err(Error::Contract(_))));
    }
}
