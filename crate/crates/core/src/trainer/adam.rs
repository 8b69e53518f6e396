//! Bias-corrected Adam without weight decay.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Module;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments of one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments<T: Scalar> {
    pub m: Vec<T>,
    pub v: Vec<T>,
}

pub struct Adam<T: Scalar> {
    pub cfg: AdamConfig,
    pub step: u64,
    pub moments: BTreeMap<String, Moments<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: AdamConfig, params: &[(String, Tensor<T>)]) -> Self {
        let moments = params
            .iter()
            .map(|(n, t)| {
                (
                    n.clone(),
                    Moments {
                        m: vec![T::zero(); t.numel()],
                        v: vec![T::zero(); t.numel()],
                    },
                )
            })
            .collect();
        Adam { cfg, step: 0, moments }
    }

    /// New values for every tracked parameter given its stored gradient.
    pub fn compute(&mut self, current: &HashMap<String, Tensor<T>>, lr: f64) -> Result<Vec<(String, Vec<T>)>> {
        let mut grads = Vec::with_capacity(self.moments.len());
        for name in self.moments.keys() {
            let p = current.get(name).ok_or_else(|| Error::MissingGradient(name.clone()))?;
            let g = p.grad().ok_or_else(|| Error::MissingGradient(name.clone()))?;
            grads.push(g);
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::lit(self.cfg.beta1), T::lit(self.cfg.beta2));
        let c1 = T::one() - b1.powi(t);
        let c2 = T::one() - b2.powi(t);
        let eps = T::lit(self.cfg.eps);
        let lr_t = T::lit(lr);
        let mut out = Vec::with_capacity(grads.len());
        for ((name, mom), g) in self.moments.iter_mut().zip(grads) {
            let p = &current[name];
            let mut data = p.data().to_vec();
            for i in 0..g.len() {
                mom.m[i] = b1 * mom.m[i] + (T::one() - b1) * g[i];
                mom.v[i] = b2 * mom.v[i] + (T::one() - b2) * g[i] * g[i];
                let m_hat = mom.m[i] / c1;
                let v_hat = mom.v[i] / c2;
                if lr != 0.0 {
                    data[i] -= lr_t * m_hat / (v_hat.sqrt() + eps);
                }
            }
            out.push((name.clone(), data));
        }
        Ok(out)
    }

    /// One optimizer step over the module's tracked parameters. Parameters
    /// are replaced by fresh leaves carrying the updated values.
    pub fn step<M: Module<T> + ?Sized>(&mut self, module: &mut M, lr: f64) -> Result<()> {
        let current: HashMap<String, Tensor<T>> = module
            .named_params()
            .into_iter()
            .filter(|(n, _)| self.moments.contains_key(n))
            .collect();
        let updates: HashMap<String, Vec<T>> = self.compute(&current, lr)?.into_iter().collect();
        module.visit_mut("", &mut |name, t| {
            if let Some(d) = updates.get(&name) {
                *t = Tensor::param(t.shape().to_vec(), d.clone()).expect("shape");
            }
        });
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn param(values: &[f64]) -> Tensor<f64> {
        Tensor::param([values.len()], values.to_vec()).unwrap()
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p = param(&[0.5, -1.0, 2.0]);
        let loss = p.mul(&Tensor::from_f64([3], &[3.0, -0.25, 1e-3]).unwrap()).unwrap().sum();
        loss.backward().unwrap();
        let mut adam = Adam::new(AdamConfig::default(), &[("".to_string(), p.clone())]);
        adam.step(&mut p, 0.01).unwrap();
        let expect = [0.5 - 0.01, -1.0 + 0.01, 2.0 - 0.01];
        for (a, e) in p.data().iter().zip(expect) {
            // m̂/(√v̂+ε) = g/(|g|+ε): within lr·ε/|g| of ±lr.
            assert!((a - e).abs() < 1e-7, "{a} vs {e}");
        }
        assert_eq!(adam.cfg.beta1, 0.9);
        assert_eq!(adam.cfg.beta2, 0.999);
    }

    #[test]
    fn zero_gradient_is_no_change() {
        let mut p = param(&[0.5, -1.0]);
        p.scale(0.0).sum().backward().unwrap();
        let before = p.data().to_vec();
        let mut adam = Adam::new(AdamConfig::default(), &[("".to_string(), p.clone())]);
        adam.step(&mut p, 0.1).unwrap();
        assert_eq!(p.data(), &before[..]);
    }

    #[test]
    fn zero_lr_is_bitwise_noop() {
        let mut rng = Rng::new(1);
        let mut p = Tensor::<f64>::param([5], rng.normal_vec(5, 1.0)).unwrap();
        let mut d = p.data().to_vec();
        d[0] = -0.0;
        p = p.with_data(d).unwrap();
        p.mul(&p).unwrap().sum().backward().unwrap();
        let before: Vec<u64> = p.data().iter().map(|x| x.to_bits()).collect();
        let mut adam = Adam::new(AdamConfig::default(), &[("".to_string(), p.clone())]);
        adam.step(&mut p, 0.0).unwrap();
        let after: Vec<u64> = p.data().iter().map(|x| x.to_bits()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut p = param(&[1.0]);
        let mut adam = Adam::new(AdamConfig::default(), &[("".to_string(), p.clone())]);
        assert!(matches!(adam.step(&mut p, 0.1), Err(Error::MissingGradient(_))));
    }

    #[test]
    fn quadratic_trajectory_matches_hand_stepped_recurrence() {
        // f(w) = Σ a·w², gradient 2·a·w.
        let a = [0.7, -1.3, 2.0];
        let w0 = [1.0, 0.5, -2.0];
        let lr = 0.05;
        let mut p = Tensor::<f64>::param([3], w0.to_vec()).unwrap();
        let mut adam = Adam::new(AdamConfig::default(), &[("".to_string(), p.clone())]);
        let coef = Tensor::from_f64([3], &a).unwrap();
        for _ in 0..3 {
            p.zero_grad();
            p.mul(&p).unwrap().mul(&coef).unwrap().sum().backward().unwrap();
            adam.step(&mut p, lr).unwrap();
        }
        let (mut w, mut m, mut v) = (w0, [0.0; 3], [0.0; 3]);
        for t in 1..=3 {
            for i in 0..3 {
                let g = 2.0 * a[i] * w[i];
                m[i] = 0.9 * m[i] + 0.1 * g;
                v[i] = 0.999 * v[i] + 0.001 * g * g;
                let mh = m[i] / (1.0 - 0.9f64.powi(t));
                let vh = v[i] / (1.0 - 0.999f64.powi(t));
                w[i] -= lr * mh / (vh.sqrt() + 1e-8);
            }
        }
        for (x, y) in p.data().iter().zip(w) {
            assert!((x - y).abs() <= 1e-12);
        }
        assert_eq!(adam.step, 3);
        assert_eq!(adam.moments[""].m.len(), 3);
    }
}
