use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

use super::{Gradients, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl AdamConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

/// Adam with bias correction. Weight decay is an L2 term added to the raw
/// gradient before the moment update.
#[derive(Clone, Debug)]
pub struct Adam<S> {
    config: AdamConfig,
    group: Option<String>,
    step: u64,
    moments: BTreeMap<String, (Tensor<S>, Tensor<S>)>,
}

impl<S: Scalar> Adam<S> {
    /// Optimizer over every trainable parameter of a store.
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            group: None,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Optimizer restricted to the parameters tagged `group`.
    pub fn for_group(config: AdamConfig, group: &str) -> Self {
        Self {
            group: Some(group.to_string()),
            ..Self::new(config)
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn set_steps(&mut self, step: u64) {
        self.step = step;
    }

    /// Applies one update. Parameters without a gradient stay unchanged.
    pub fn step(&mut self, store: &mut ParamStore<S>, grads: &Gradients<S>) -> usize {
        self.step += 1;
        let c = &self.config;
        let (b1, b2) = (S::lit(c.beta1), S::lit(c.beta2));
        let (lr, eps, wd) = (S::lit(c.lr), S::lit(c.eps), S::lit(c.weight_decay));
        let one = S::one();
        let t = self.step as i32;
        let bc1 = one - b1.powi(t);
        let bc2 = one - b2.powi(t);
        let mut updated = 0;
        for (name, grad) in grads.iter() {
            let Some(param) = store.get_mut(name) else {
                continue;
            };
            if !param.trainable {
                continue;
            }
            if let Some(g) = &self.group {
                if &param.group != g {
                    continue;
                }
            }
            let shape = param.value.shape().to_vec();
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (Tensor::zeros(&shape), Tensor::zeros(&shape)));
            let p = param.value.data_mut();
            let (md, vd) = (m.data_mut(), v.data_mut());
            for k in 0..p.len() {
                let g = grad.data()[k] + wd * p[k];
                md[k] = b1 * md[k] + (one - b1) * g;
                vd[k] = b2 * vd[k] + (one - b2) * g * g;
                let m_hat = md[k] / bc1;
                let v_hat = vd[k] / bc2;
                p[k] = p[k] - lr * m_hat / (v_hat.sqrt() + eps);
            }
            updated += 1;
        }
        updated
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    fn grads_for(store: &ParamStore<f64>, scale: f64) -> Gradients<f64> {
        // loss = scale * p  =>  dloss/dp = scale
        let mut tape = Tape::new();
        let p = tape.param(store, "p").unwrap();
        let l = tape.scale(p, scale);
        let l = tape.sum(l);
        tape.backward(l).unwrap()
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        store.insert("p", Tensor::scalar(0.5), true, "w");
        let mut adam = Adam::new(AdamConfig::new(0.001, 0.0));
        let g = grads_for(&store, 1.0);
        adam.step(&mut store, &g);
        let delta = store.value("p").unwrap().data()[0] - 0.5;
        assert!((delta - (-0.001 / (1.0 + 1e-8))).abs() < 1e-15);
        assert!((delta + 0.000999999990).abs() < 1e-12);
    }

    #[test]
    fn three_step_trace() {
        // loss = p^2 / 2 so the gradient equals p; reference values worked by hand
        let mut store = ParamStore::new();
        store.insert("p", Tensor::scalar(1.0), true, "w");
        let mut adam = Adam::new(AdamConfig::new(0.1, 0.0));
        let expected = [
            0.900_000_001,
            0.800_412_229_712_338_2,
            0.701_586_274_504_415,
        ];
        for want in expected {
            let p = store.value("p").unwrap().data()[0];
            let g = grads_for(&store, p);
            adam.step(&mut store, &g);
            let got = store.value("p").unwrap().data()[0];
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut store = ParamStore::new();
        store.insert("p", Tensor::scalar(0.5), true, "w");
        let mut adam = Adam::new(AdamConfig::new(0.01, 0.0));
        for _ in 0..3 {
            let g = grads_for(&store, 0.0);
            adam.step(&mut store, &g);
        }
        assert_eq!(store.value("p").unwrap().data(), &[0.5]);
        assert_eq!(adam.steps(), 3);
    }

    #[test]
    fn missing_gradient_and_other_group_untouched() {
        let mut store = ParamStore::new();
        store.insert("p", Tensor::scalar(0.5), true, "a");
        let mut adam = Adam::for_group(AdamConfig::new(0.1, 0.0), "w");
        let g = grads_for(&store, 1.0);
        adam.step(&mut store, &g);
        assert_eq!(store.value("p").unwrap().data(), &[0.5]);
    }

    #[test]
    fn deterministic_bits() {
        let run = || {
            let mut store = ParamStore::new();
            store.insert("p", Tensor::scalar(0.123), true, "w");
            let mut adam = Adam::new(AdamConfig::new(0.003, 1e-4));
            for k in 0..5 {
                let g = grads_for(&store, 0.7 * k as f64 - 1.0);
                adam.step(&mut store, &g);
            }
            store.value("p").unwrap().data()[0].to_bits()
        };
        assert_eq!(run(), run());
    }
}
