use std::collections::BTreeMap;

use crate::dataset::FactorModel;
use crate::{ItemId, UserId};

/// Sparse partial derivatives over the rows of a [`FactorModel`]. Rows that
/// were never touched are absent and count as zero.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamGrad {
    dim: usize,
    pub users: BTreeMap<UserId, Vec<f64>>,
    pub items: BTreeMap<ItemId, Vec<f64>>,
}

impl ParamGrad {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            users: BTreeMap::new(),
            items: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty() && self.items.is_empty()
    }

    fn axpy(dst: &mut [f64], a: f64, x: &[f64]) {
        for (d, v) in dst.iter_mut().zip(x) {
            *d += a * v;
        }
    }

    pub fn add_user(&mut self, u: UserId, scale: f64, row: &[f64]) {
        let dim = self.dim;
        Self::axpy(self.users.entry(u).or_insert_with(|| vec![0.0; dim]), scale, row);
    }

    pub fn add_item(&mut self, d: ItemId, scale: f64, row: &[f64]) {
        let dim = self.dim;
        Self::axpy(self.items.entry(d).or_insert_with(|| vec![0.0; dim]), scale, row);
    }

    /// Chain a gradient w.r.t. the scores `<u, v_d> / temperature` of one
    /// query into the user row and the item rows, adding `scale` times it.
    pub fn add_score_gradient(
        &mut self,
        model: &FactorModel,
        temperature: f64,
        user: UserId,
        items: &[ItemId],
        wrt_scores: &[f64],
        scale: f64,
    ) {
        debug_assert_eq!(items.len(), wrt_scores.len());
        let s = scale / temperature;
        let mut urow = vec![0.0; self.dim];
        let uvec = model.user(user);
        for (&d, &g) in items.iter().zip(wrt_scores) {
            if g == 0.0 {
                continue;
            }
            Self::axpy(&mut urow, g, model.item(d));
            self.add_item(d, s * g, uvec);
        }
        self.add_user(user, s, &urow);
    }

    /// Add `other` into `self`.
    pub fn merge(mut self, other: ParamGrad) -> ParamGrad {
        for (u, row) in other.users {
            self.add_user(u, 1.0, &row);
        }
        for (d, row) in other.items {
            self.add_item(d, 1.0, &row);
        }
        self
    }

    pub fn scale(&mut self, a: f64) {
        for row in self.users.values_mut().chain(self.items.values_mut()) {
            row.iter_mut().for_each(|x| *x *= a);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.users
            .values()
            .chain(self.items.values())
            .all(|r| r.iter().all(|x| x.is_finite()))
    }

    pub fn max_abs(&self) -> f64 {
        self.users
            .values()
            .chain(self.items.values())
            .flat_map(|r| r.iter())
            .fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn user_row(&self, u: UserId) -> Option<&[f64]> {
        self.users.get(&u).map(Vec::as_slice)
    }

    pub fn item_row(&self, d: ItemId) -> Option<&[f64]> {
        self.items.get(&d).map(Vec::as_slice)
    }
}
