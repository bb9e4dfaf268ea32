use rand::Rng;

use crate::error::{Error, Result};
use crate::policy::{pl, sampler, PlPolicy, PlSampler, Ranking};
use crate::{ItemId, UserId};

/// A candidate generator feeding a re-ranker: `y_c ~ candidate(.|q)` of
/// length `k2` from the whole catalog, then `y_r ~ reranker(.|y_c, q)` of
/// length `k` from the items of `y_c`.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoStage {
    pub candidate: PlPolicy,
    pub reranker: PlPolicy,
    pub k2: usize,
    pub k: usize,
}

impl TwoStage {
    pub fn new(candidate: PlPolicy, reranker: PlPolicy, k2: usize, k: usize) -> Result<Self> {
        let n = candidate.model.n_items();
        if reranker.model.n_items() != n || reranker.model.n_users() != candidate.model.n_users() {
            return Err(Error::Argument(
                "candidate and re-ranker models cover different catalogs".into(),
            ));
        }
        if !(k >= 1 && k <= k2 && k2 <= n) {
            return Err(Error::Argument(format!(
                "need 1 <= K ({k}) <= K2 ({k2}) <= n_items ({n})"
            )));
        }
        Ok(Self {
            candidate,
            reranker,
            k2,
            k,
        })
    }

    pub fn n_items(&self) -> usize {
        self.candidate.model.n_items()
    }

    /// One draw of `(y_c, y_r)`.
    pub fn sample<R: Rng + ?Sized>(&self, user: UserId, rng: &mut R) -> Result<(Ranking, Ranking)> {
        let catalog: Vec<ItemId> = (0..self.n_items()).collect();
        let yc = self.candidate.sample_topk(user, &catalog, self.k2, rng)?;
        let yr = self.reranker.sample_topk(user, yc.items(), self.k, rng)?;
        Ok((yc, yr))
    }

    /// Precompute everything needed for many draws for one query.
    pub fn query_sampler(&self, user: UserId) -> Result<QuerySampler> {
        let cand_scores = self.candidate.catalog_scores(user)?;
        let rer_scores = self.reranker.catalog_scores(user)?;
        Ok(QuerySampler::new(user, &cand_scores, rer_scores, self.k2, self.k))
    }
}

/// One pipeline draw together with the normalizer information that the
/// gradient code needs.
#[derive(Debug, Clone, Default)]
pub struct PipelineDraw {
    /// `y_c` as catalog item ids.
    pub candidates: Vec<ItemId>,
    /// Log of the candidate-score mass never placed in `y_c`.
    pub cand_log_tail: f64,
    /// `y_r` as indices into `candidates`.
    pub displayed_pos: Vec<usize>,
    /// Log of the re-ranker-score mass of candidates not displayed.
    pub rer_log_tail: f64,
}

impl PipelineDraw {
    pub fn displayed(&self) -> impl Iterator<Item = ItemId> + '_ {
        self.displayed_pos.iter().map(|&p| self.candidates[p])
    }

    /// 1-based display rank of catalog item `d`.
    pub fn display_rank(&self, d: ItemId) -> Option<usize> {
        self.displayed().position(|x| x == d).map(|p| p + 1)
    }
}

/// Fast repeated sampling of the pipeline for a single query.
#[derive(Debug, Clone)]
pub struct QuerySampler {
    pub user: UserId,
    pub k2: usize,
    pub k: usize,
    cand: PlSampler,
    rer_scores: Vec<f64>,
    rer_weights: Vec<f64>,
    rer_shift: f64,
    scratch: Vec<f64>,
    cum: Vec<f64>,
}

impl QuerySampler {
    pub fn new(user: UserId, cand_scores: &[f64], rer_scores: Vec<f64>, k2: usize, k: usize) -> Self {
        assert!(k <= k2 && k2 <= cand_scores.len());
        let shift = rer_scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let shift = if shift.is_finite() { shift } else { 0.0 };
        let rer_weights = rer_scores.iter().map(|s| (s - shift).exp()).collect();
        Self {
            user,
            k2,
            k,
            cand: PlSampler::new(cand_scores),
            rer_scores,
            rer_weights,
            rer_shift: shift,
            scratch: Vec::with_capacity(k2),
            cum: Vec::with_capacity(k2),
        }
    }

    pub fn candidate_scores(&self) -> &[f64] {
        self.cand.scores()
    }

    pub fn reranker_scores(&self) -> &[f64] {
        &self.rer_scores
    }

    /// Common shift of the re-ranker weights: the largest catalog score.
    pub fn reranker_shift(&self) -> f64 {
        self.rer_shift
    }

    /// `exp(score - shift)` of item `d` under the re-ranker.
    pub fn reranker_weight(&self, d: ItemId) -> f64 {
        self.rer_weights[d]
    }

    pub fn draw<R: Rng + ?Sized>(&mut self, rng: &mut R, out: &mut PipelineDraw) {
        out.cand_log_tail = self.cand.sample(self.k2, rng, &mut out.candidates);
        self.scratch.clear();
        self.scratch
            .extend(out.candidates.iter().map(|&d| self.rer_weights[d]));
        let tail = sampler::sample_small(&mut self.scratch, &mut self.cum, self.k, rng, &mut out.displayed_pos);
        out.rer_log_tail = if tail > 0.0 {
            tail.ln() + self.rer_shift
        } else {
            // Underflowed or empty: recompute in log space.
            pl::log_sum_exp(
                (0..out.candidates.len())
                    .filter(|p| !out.displayed_pos.contains(p))
                    .map(|p| self.rer_scores[out.candidates[p]]),
            )
        };
    }

    /// Draw only a single-stage `l`-prefix from the candidate scores.
    pub fn draw_candidate_prefix<R: Rng + ?Sized>(
        &mut self,
        l: usize,
        rng: &mut R,
        out: &mut Vec<ItemId>,
    ) -> f64 {
        self.cand.sample(l, rng, out)
    }
}
