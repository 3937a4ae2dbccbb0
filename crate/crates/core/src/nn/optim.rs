use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::nn::params::{ParamGrads, ParamStore};
use crate::nn::tensor::Tensor;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<S> {
    pub config: AdamWConfig,
    step: u64,
    first: Vec<Tensor<S>>,
    second: Vec<Tensor<S>>,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(config: AdamWConfig, params: &ParamStore<S>) -> Self {
        let zeros = |p: &crate::nn::params::Param<S>| Tensor::zeros(p.value.shape());
        Self {
            config,
            step: 0,
            first: params.iter().map(zeros).collect(),
            second: params.iter().map(zeros).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. Returns `false` (and leaves everything untouched)
    /// when every gradient entry is exactly zero.
    pub fn step(&mut self, params: &mut ParamStore<S>, grads: &ParamGrads<S>) -> bool {
        assert_eq!(grads.len(), params.len(), "gradient/parameter count mismatch");
        if grads.is_all_zero() {
            return false;
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let lr = S::of(c.lr);
        let decay = S::of(1.0 - c.lr * c.weight_decay);
        let (b1, b2) = (S::of(c.beta1), S::of(c.beta2));
        let (ob1, ob2) = (S::one() - b1, S::one() - b2);
        let (ibc1, ibc2) = (S::of(1.0 / bc1), S::of(1.0 / bc2));
        let eps = S::of(c.eps);
        for (((param, grad), m), v) in params
            .iter_mut()
            .zip(grads.iter())
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            let values = param.value.as_mut_slice();
            for x in values.iter_mut() {
                *x = *x * decay;
            }
            let Some(grad) = grad else {
                // No gradient: moments decay toward zero and still move the parameter.
                for ((x, mm), vv) in values.iter_mut().zip(m.as_mut_slice()).zip(v.as_mut_slice()) {
                    *mm = *mm * b1;
                    *vv = *vv * b2;
                    *x = *x - lr * (*mm * ibc1) / ((*vv * ibc2).sqrt() + eps);
                }
                continue;
            };
            for (((x, &g), mm), vv) in values
                .iter_mut()
                .zip(grad.as_slice())
                .zip(m.as_mut_slice())
                .zip(v.as_mut_slice())
            {
                *mm = b1 * *mm + ob1 * g;
                *vv = b2 * *vv + ob2 * g * g;
                *x = *x - lr * (*mm * ibc1) / ((*vv * ibc2).sqrt() + eps);
            }
        }
        true
    }

    /// Serializes moment buffers as a parameter archive (`m.*`, `v.*`).
    pub fn state_store(&self, params: &ParamStore<S>) -> ParamStore<S> {
        let mut store = ParamStore::new();
        for (p, m) in params.iter().zip(&self.first) {
            store.add(format!("m.{}", p.name), m.clone());
        }
        for (p, v) in params.iter().zip(&self.second) {
            store.add(format!("v.{}", p.name), v.clone());
        }
        store
    }

    pub fn from_state(
        config: AdamWConfig,
        step: u64,
        params: &ParamStore<S>,
        state: &ParamStore<S>,
    ) -> Result<Self> {
        let n = params.len();
        if state.len() != 2 * n {
            return Err(invalid!(
                "optimizer state has {} buffers, expected {}",
                state.len(),
                2 * n
            ));
        }
        let buffers: Vec<&crate::nn::params::Param<S>> = state.iter().collect();
        let mut first = Vec::with_capacity(n);
        let mut second = Vec::with_capacity(n);
        for (i, p) in params.iter().enumerate() {
            let (m, v) = (buffers[i], buffers[n + i]);
            if m.name != format!("m.{}", p.name)
                || v.name != format!("v.{}", p.name)
                || m.value.shape() != p.value.shape()
                || v.value.shape() != p.value.shape()
            {
                return Err(invalid!("optimizer state does not match parameter {}", p.name));
            }
            first.push(m.value.clone());
            second.push(v.value.clone());
        }
        Ok(Self {
            config,
            step,
            first,
            second,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::graph::Graph;

    #[test]
    fn zero_gradient_leaves_parameters_untouched() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("p", Tensor::filled(&[3], 2.0));
        let mut opt = AdamW::new(AdamWConfig::default(), &store);
        let mut grads = ParamGrads::empty(1);
        grads.add(id, Tensor::zeros(&[3]));
        let before = store.clone();
        assert!(!opt.step(&mut store, &grads));
        assert_eq!(store, before);
        assert_eq!(opt.steps_taken(), 0);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("p", Tensor::from_vec(&[2], vec![3.0, -2.0]).unwrap());
        let cfg = AdamWConfig {
            lr: 0.05,
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, &store);
        for _ in 0..500 {
            let grads = {
                let mut g = Graph::new(&store);
                let p = g.param(id);
                let l = g.sum_squares(p);
                g.backward(l)
            };
            opt.step(&mut store, &grads);
        }
        assert!(store.get(id).as_slice().iter().all(|v| v.abs() < 1e-2));
    }
}
