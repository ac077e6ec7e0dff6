//! AdamW with decoupled weight decay and global-norm gradient clipping.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T: Scalar> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub steps: u64,
    /// First and second moments by parameter name.
    pub moments: BTreeMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, steps: 0, moments: BTreeMap::new() }
    }

    /// Global L2 norm of the gradients of `params`.
    pub fn grad_norm(params: &[(String, Tensor<T>)]) -> f64 {
        params.iter().filter_map(|(_, p)| p.grad()).map(|g| g.iter().map(|v| v.to_f64c().powi(2)).sum::<f64>()).sum::<f64>().sqrt()
    }

    /// One update. Gradients are rescaled so their global norm is at most
    /// `clip` (when `clip > 0`). Returns the pre-clipping norm.
    pub fn step(&mut self, params: &[(String, Tensor<T>)], clip: f64) -> Result<f64> {
        let norm = Self::grad_norm(params);
        if !norm.is_finite() {
            return Err(Error::NonFinite(format!("gradient norm {norm} at step {}", self.steps)));
        }
        let scale = if clip > 0.0 && norm > clip { clip / norm } else { 1.0 };
        self.steps += 1;
        let bc1 = 1.0 - self.beta1.powi(self.steps as i32);
        let bc2 = 1.0 - self.beta2.powi(self.steps as i32);
        for (name, p) in params {
            let Some(g) = p.grad() else { continue };
            let (m, v) = self.moments.entry(name.clone()).or_insert_with(|| (vec![T::zero(); g.len()], vec![T::zero(); g.len()]));
            if m.len() != g.len() {
                return Err(Error::State(format!("optimizer state for {name} has {} values, parameter has {}", m.len(), g.len())));
            }
            let mut data = p.data_mut()?;
            for i in 0..g.len() {
                let gi = g[i].to_f64c() * scale;
                let mi = self.beta1 * m[i].to_f64c() + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * v[i].to_f64c() + (1.0 - self.beta2) * gi * gi;
                m[i] = T::from_f64c(mi);
                v[i] = T::from_f64c(vi);
                let w = data[i].to_f64c();
                let upd = (mi / bc1) / ((vi / bc2).sqrt() + self.eps);
                data[i] = T::from_f64c(w - self.lr * (upd + self.weight_decay * w));
            }
        }
        Ok(norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let p = Tensor::<f64>::param(&[2], vec![1.0, -1.0]).unwrap();
        p.square().sum_all().backward().unwrap();
        let mut opt = AdamW::new(0.1, 0.0);
        opt.step(&[("p".into(), p.clone())], 0.0).unwrap();
        let d = p.to_vec();
        assert!((d[0] - 0.9).abs() < 1e-6 && (d[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn minimises_a_quadratic() {
        let p = Tensor::<f64>::param(&[3], vec![3.0, -2.0, 0.5]).unwrap();
        let mut opt = AdamW::new(0.05, 0.0);
        for _ in 0..500 {
            p.zero_grad();
            p.square().sum_all().backward().unwrap();
            opt.step(&[("p".into(), p.clone())], 1.0).unwrap();
        }
        assert!(p.to_vec().iter().all(|v| v.abs() < 0.05), "{:?}", p.to_vec());
    }
}
