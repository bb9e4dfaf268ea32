//! Adaptive-moment optimizer with lazy (sparse) row updates, run as ascent.

use crate::dataset::FactorModel;
use crate::error::{Error, Result};
use crate::policy::ParamGrad;

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    dim: usize,
    m_users: Vec<f64>,
    v_users: Vec<f64>,
    m_items: Vec<f64>,
    v_items: Vec<f64>,
}

impl OptimizerState {
    pub fn new(model: &FactorModel, learning_rate: f64) -> Self {
        let (nu, ni, dim) = (model.n_users(), model.n_items(), model.dim());
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            dim,
            m_users: vec![0.0; nu * dim],
            v_users: vec![0.0; nu * dim],
            m_items: vec![0.0; ni * dim],
            v_items: vec![0.0; ni * dim],
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One ascent step on the rows present in `grads`; absent rows keep
    /// both their parameters and their moments.
    pub fn step(&mut self, model: &mut FactorModel, grads: &ParamGrad) -> Result<()> {
        if model.dim() != self.dim || (!grads.is_empty() && grads.dim() != self.dim) {
            return Err(Error::Argument(format!(
                "optimizer dim {} vs model {} vs gradient {}",
                self.dim,
                model.dim(),
                grads.dim()
            )));
        }
        if !grads.is_finite() {
            let bad_users: Vec<_> = grads
                .users
                .iter()
                .filter(|(_, r)| r.iter().any(|x| !x.is_finite()))
                .map(|(u, _)| *u)
                .take(5)
                .collect();
            let bad_items: Vec<_> = grads
                .items
                .iter()
                .filter(|(_, r)| r.iter().any(|x| !x.is_finite()))
                .map(|(d, _)| *d)
                .take(5)
                .collect();
            return Err(Error::NonFinite(format!(
                "step {}: user rows {bad_users:?}, item rows {bad_items:?}",
                self.step + 1
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let dim = self.dim;
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.learning_rate, self.epsilon);
        let update = |param: &mut [f64], m: &mut [f64], v: &mut [f64], g: &[f64]| {
            for k in 0..dim {
                m[k] = b1 * m[k] + (1.0 - b1) * g[k];
                v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
                let mh = m[k] / c1;
                let vh = v[k] / c2;
                param[k] += lr * mh / (vh.sqrt() + eps);
            }
        };
        for (&u, g) in &grads.users {
            let r = u * dim..(u + 1) * dim;
            update(model.user_mut(u), &mut self.m_users[r.clone()], &mut self.v_users[r], g);
        }
        for (&d, g) in &grads.items {
            let r = d * dim..(d + 1) * dim;
            update(model.item_mut(d), &mut self.m_items[r.clone()], &mut self.v_items[r], g);
        }
        Ok(())
    }
}
