//! Plackett-Luce ranking policies over factor-model scores.
//!
//! The same [`PlPolicy`] serves as candidate generator (support = the whole
//! catalog) and as re-ranker (support = the candidate set). Rankings are
//! sampled by Gumbel-top-`L`; log-probabilities and their gradients are exact.

mod grad;
mod pipeline;
pub mod pl;
mod ranking;
pub mod sampler;

use std::collections::HashMap;

use rand::Rng;

pub use grad::ParamGrad;
pub use pipeline::{PipelineDraw, QuerySampler, TwoStage};
pub use ranking::Ranking;
pub use sampler::PlSampler;

use crate::dataset::FactorModel;
use crate::error::{Error, Result};
use crate::{ItemId, UserId};

/// Largest support accepted by exhaustive enumeration.
pub const ENUMERATION_LIMIT: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct PlPolicy {
    pub model: FactorModel,
    temperature: f64,
}

/// Gradient of a log-probability with respect to the (temperature-scaled)
/// scores of one query's support.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreGradient {
    pub user: UserId,
    pub support: Vec<ItemId>,
    pub wrt_scores: Vec<f64>,
}

impl ScoreGradient {
    /// Chain through the bilinear score into user and item rows.
    pub fn to_params(&self, policy: &PlPolicy) -> ParamGrad {
        let mut g = ParamGrad::new(policy.model.dim());
        g.add_score_gradient(
            &policy.model,
            policy.temperature,
            self.user,
            &self.support,
            &self.wrt_scores,
            1.0,
        );
        g
    }
}

impl PlPolicy {
    pub fn new(model: FactorModel, temperature: f64) -> Result<Self> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::Argument(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        Ok(Self { model, temperature })
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn with_temperature(&self, temperature: f64) -> Result<Self> {
        Self::new(self.model.clone(), temperature)
    }

    fn check_user(&self, user: UserId) -> Result<()> {
        if user >= self.model.n_users() {
            return Err(Error::Index {
                what: "user",
                index: user,
                bound: self.model.n_users(),
            });
        }
        Ok(())
    }

    /// Scores of every catalog item for `user`, already divided by the temperature.
    pub fn catalog_scores(&self, user: UserId) -> Result<Vec<f64>> {
        self.check_user(user)?;
        let u = self.model.user(user);
        Ok((0..self.model.n_items())
            .map(|d| crate::dataset::dot(u, self.model.item(d)) / self.temperature)
            .collect())
    }

    pub fn scores(&self, user: UserId, support: &[ItemId]) -> Result<Vec<f64>> {
        self.check_user(user)?;
        let u = self.model.user(user);
        support
            .iter()
            .map(|&d| {
                if d >= self.model.n_items() {
                    Err(Error::Index {
                        what: "item",
                        index: d,
                        bound: self.model.n_items(),
                    })
                } else {
                    Ok(crate::dataset::dot(u, self.model.item(d)) / self.temperature)
                }
            })
            .collect()
    }

    pub fn sample_topk<R: Rng + ?Sized>(
        &self,
        user: UserId,
        support: &[ItemId],
        l: usize,
        rng: &mut R,
    ) -> Result<Ranking> {
        if l > support.len() {
            return Err(Error::Argument(format!(
                "cannot draw {l} items from a support of {}",
                support.len()
            )));
        }
        let s = self.scores(user, support)?;
        let order = pl::gumbel_top_k(&s, l, rng);
        Ok(Ranking::from_distinct(order.into_iter().map(|i| support[i]).collect()))
    }

    fn positions(support: &[ItemId], y: &Ranking) -> Result<Vec<usize>> {
        let index: HashMap<ItemId, usize> =
            support.iter().enumerate().map(|(i, &d)| (d, i)).collect();
        if index.len() != support.len() {
            return Err(Error::Argument("support contains duplicate items".into()));
        }
        y.items()
            .iter()
            .map(|d| {
                index
                    .get(d)
                    .copied()
                    .ok_or_else(|| Error::Argument(format!("ranked item {d} outside support")))
            })
            .collect()
    }

    pub fn log_prob(&self, user: UserId, support: &[ItemId], y: &Ranking) -> Result<f64> {
        let order = Self::positions(support, y)?;
        let s = self.scores(user, support)?;
        Ok(pl::log_prob(&s, &order))
    }

    pub fn grad_log_prob(
        &self,
        user: UserId,
        support: &[ItemId],
        y: &Ranking,
    ) -> Result<ScoreGradient> {
        let order = Self::positions(support, y)?;
        let s = self.scores(user, support)?;
        Ok(ScoreGradient {
            user,
            support: support.to_vec(),
            wrt_scores: pl::grad_log_prob(&s, &order),
        })
    }

    /// Every ordered `l`-prefix of `support` with its exact probability.
    pub fn enumerate_rankings(
        &self,
        user: UserId,
        support: &[ItemId],
        l: usize,
    ) -> Result<Vec<(Ranking, f64)>> {
        if support.len() > ENUMERATION_LIMIT {
            return Err(Error::TooLarge {
                size: support.len(),
                limit: ENUMERATION_LIMIT,
            });
        }
        if l > support.len() {
            return Err(Error::Argument(format!(
                "cannot enumerate {l}-prefixes of a support of {}",
                support.len()
            )));
        }
        let s = self.scores(user, support)?;
        Ok(pl::ordered_prefixes(support.len(), l)
            .into_iter()
            .map(|o| {
                let p = pl::log_prob(&s, &o).exp();
                (
                    Ranking::from_distinct(o.into_iter().map(|i| support[i]).collect()),
                    p,
                )
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn direct(scores: &[f64], t: f64) -> PlPolicy {
        PlPolicy::new(FactorModel::with_direct_scores(&[scores.to_vec()]), t).unwrap()
    }

    #[test]
    fn zero_vectors_score_zero() {
        let p = PlPolicy::new(FactorModel::zeros(1, 3, 4), 1.0).unwrap();
        assert_eq!(p.scores(0, &[0, 1, 2]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn dot_product_and_temperature() {
        let m = FactorModel::from_tables(2, vec![1.0, 0.0], vec![2.0, 0.0]).unwrap();
        let p1 = PlPolicy::new(m.clone(), 1.0).unwrap();
        let p2 = PlPolicy::new(m, 2.0).unwrap();
        assert_eq!(p1.scores(0, &[0]).unwrap(), vec![2.0]);
        assert_eq!(p2.scores(0, &[0]).unwrap(), vec![1.0]);
    }

    #[test]
    fn out_of_range_ids() {
        let p = direct(&[0.0, 1.0], 1.0);
        assert!(matches!(p.scores(1, &[0]), Err(Error::Index { what: "user", .. })));
        assert!(matches!(p.scores(0, &[2]), Err(Error::Index { what: "item", .. })));
        assert!(PlPolicy::new(FactorModel::zeros(1, 1, 1), 0.0).is_err());
    }

    #[test]
    fn single_support_is_deterministic() {
        let p = direct(&[0.0, 1.0, 2.0], 1.0);
        let mut rng = crate::rng::stream(0, &[]);
        for _ in 0..10 {
            assert_eq!(p.sample_topk(0, &[1], 1, &mut rng).unwrap().items(), &[1]);
        }
        let y = Ranking::new(vec![1]).unwrap();
        assert_eq!(p.log_prob(0, &[1], &y).unwrap(), 0.0);
        assert_eq!(p.grad_log_prob(0, &[1], &y).unwrap().wrt_scores, vec![0.0]);
    }

    #[test]
    fn prefix_longer_than_support_is_rejected() {
        let p = direct(&[0.0, 1.0], 1.0);
        let mut rng = crate::rng::stream(0, &[]);
        assert!(matches!(
            p.sample_topk(0, &[0, 1], 3, &mut rng),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn ranked_item_outside_support() {
        let p = direct(&[0.0, 1.0, 2.0], 1.0);
        let y = Ranking::new(vec![2]).unwrap();
        assert!(matches!(p.log_prob(0, &[0, 1], &y), Err(Error::Argument(_))));
    }

    #[test]
    fn uniform_log_prob() {
        let p = direct(&[0.7; 6], 1.0);
        let support: Vec<ItemId> = (0..6).collect();
        let y = Ranking::new(vec![3, 1, 5]).unwrap();
        let expect = -(6.0f64 * 5.0 * 4.0).ln();
        assert!((p.log_prob(0, &support, &y).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn three_item_pair_matches_enumeration() {
        let p = direct(&[1.0, 0.5, -0.2], 1.0);
        let support = [0, 1, 2];
        let all = p.enumerate_rankings(0, &support, 2).unwrap();
        // Independent normalization of the raw sequential products.
        let s = [1.0f64, 0.5, -0.2];
        let raw = |a: usize, b: usize| {
            let z1: f64 = s.iter().map(|x| x.exp()).sum();
            let z2 = z1 - s[a].exp();
            s[a].exp() / z1 * s[b].exp() / z2
        };
        let total: f64 = (0..3)
            .flat_map(|a| (0..3).filter(move |&b| b != a).map(move |b| (a, b)))
            .map(|(a, b)| raw(a, b))
            .sum();
        let y = Ranking::new(vec![1, 2]).unwrap();
        let lp = p.log_prob(0, &support, &y).unwrap();
        assert!((lp.exp() - raw(1, 2) / total).abs() < 1e-10);
        assert_eq!(all.len(), 6);
    }

    #[test]
    fn enumeration_guard_and_symmetry() {
        let p = direct(&[0.0; 9], 1.0);
        let big: Vec<ItemId> = (0..9).collect();
        assert!(matches!(
            p.enumerate_rankings(0, &big, 1),
            Err(Error::TooLarge { .. })
        ));
        let all = p.enumerate_rankings(0, &[0, 1, 2], 2).unwrap();
        assert_eq!(all.len(), 6);
        for (_, pr) in &all {
            assert!((pr - 1.0 / 6.0).abs() < 1e-12);
        }
        let full = p.enumerate_rankings(0, &[0, 1, 2], 3).unwrap();
        assert!((full.iter().map(|x| x.1).sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cold_policy_puts_mass_on_argsort() {
        let p = direct(&[3.0, 1.0, 2.0, 0.0], 1e-3);
        let y = Ranking::new(vec![0, 2, 1, 3]).unwrap();
        let lp = p.log_prob(0, &[0, 1, 2, 3], &y).unwrap();
        assert!(lp.exp() > 0.999);
    }

    #[test]
    fn chained_gradient_matches_finite_differences_on_embeddings() {
        let m = FactorModel::from_tables(
            3,
            vec![0.4, -0.3, 0.9],
            vec![0.1, 0.2, -0.5, 1.0, 0.0, 0.3, -0.7, 0.6, 0.2, 0.05, -0.1, 0.4],
        )
        .unwrap();
        let p = PlPolicy::new(m, 0.7).unwrap();
        let support = [0, 1, 2, 3];
        let y = Ranking::new(vec![2, 0]).unwrap();
        let g = p.grad_log_prob(0, &support, &y).unwrap().to_params(&p);
        let h = 1e-6;
        let bump = |f: &dyn Fn(&mut FactorModel)| {
            let mut up = p.clone();
            f(&mut up.model);
            up.log_prob(0, &support, &y).unwrap()
        };
        for k in 0..3 {
            let fd = (bump(&|m| m.user_mut(0)[k] += h) - bump(&|m| m.user_mut(0)[k] -= h)) / (2.0 * h);
            assert!((fd - g.user_row(0).unwrap()[k]).abs() < 1e-7);
            for d in 0..4 {
                let fd = (bump(&|m| m.item_mut(d)[k] += h) - bump(&|m| m.item_mut(d)[k] -= h))
                    / (2.0 * h);
                assert!((fd - g.item_row(d).unwrap()[k]).abs() < 1e-7);
            }
        }
    }
}
