//! REINFORCE gradient estimators for the candidate generator and the
//! re-ranker.
//!
//! For a logged record with clicked set `C` and a sampled pipeline draw
//! `(y_c, y_r)`, the reward is `f = sum_{d in C} exam(k(d | y_r)) / rho0(q, d)`.
//! The candidate gradient averages `f * grad log pi_c(y_c | q)` over the
//! draws, the re-ranker gradient averages `f * grad log pi_r(y_r | y_c, q)`.
//! Single-stage variants sample a length-`K` list directly from one policy
//! over the whole catalog.

use rand::Rng;
use rayon::prelude::*;

use crate::clicksim::{ClickRecord, ExaminationModel, PropensityTable};
use crate::error::Result;
use crate::policy::{pl, ParamGrad, PipelineDraw, PlPolicy, PlSampler, QuerySampler, TwoStage};
use crate::reduce::tree_reduce;
use crate::{rng, ItemId, UserId};

/// Sparse gradient over factor-model rows, the sum of per-record terms.
pub type GradAccumulator = ParamGrad;

/// Knobs shared by every estimator in this module.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientSettings {
    pub n_mc: usize,
    pub exam: ExaminationModel,
    /// Subtract the leave-one-out mean reward of the other draws.
    pub control_variate: bool,
}

/// Smallest shifted normalizer the linear-domain path will invert.
const MIN_LINEAR_Z: f64 = 1e-250;

/// Overwrite `buf` (holding the shifted weights of the placed items, in
/// order) with `S_p = sum_{j<=p} 1/Z_j`, where `Z_j` is the shifted mass
/// not placed before slot `j`. Returns false, leaving `buf` unspecified,
/// when some `Z_j` is too small to invert safely.
fn inverse_normalizer_sums(buf: &mut [f64], tail: f64) -> bool {
    let mut acc = tail;
    for x in buf.iter_mut().rev() {
        acc += *x;
        if !(acc >= MIN_LINEAR_Z) {
            return false;
        }
        *x = acc;
    }
    let mut s = 0.0;
    for x in buf.iter_mut() {
        s += 1.0 / *x;
        *x = s;
    }
    true
}

/// Accumulates `sum_s f_s * grad log P(order_s)` for Plackett-Luce prefixes
/// over one fixed score vector. Every unplaced item shares the coefficient
/// `w_i * sum_j 1/Z_j`, so that part is folded into one scalar and the
/// per-draw work is `O(L)` instead of `O(n)`.
#[derive(Debug, Clone)]
pub struct PrefixGradAcc<'a> {
    scores: &'a [f64],
    shift: f64,
    weights: Vec<f64>,
    grad: Vec<f64>,
    unplaced: f64,
    buf: Vec<f64>,
}

impl<'a> PrefixGradAcc<'a> {
    pub fn new(scores: &'a [f64]) -> Self {
        let shift = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let shift = if shift.is_finite() { shift } else { 0.0 };
        Self {
            scores,
            shift,
            weights: scores.iter().map(|s| (s - shift).exp()).collect(),
            grad: vec![0.0; scores.len()],
            unplaced: 0.0,
            buf: Vec::new(),
        }
    }

    /// Add `f * grad log P(order)`; `log_tail` is the log-mass of unplaced items.
    pub fn add(&mut self, order: &[usize], log_tail: f64, f: f64) {
        if f == 0.0 || order.is_empty() {
            return;
        }
        self.buf.clear();
        self.buf.extend(order.iter().map(|&i| self.weights[i]));
        if !inverse_normalizer_sums(&mut self.buf, (log_tail - self.shift).exp()) {
            return self.add_log_domain(order, log_tail, f);
        }
        let total = self.buf[order.len() - 1];
        self.unplaced += f * total;
        for (p, &i) in order.iter().enumerate() {
            let w = self.weights[i];
            // the second term cancels what finish() subtracts from every item
            self.grad[i] += f * (1.0 - w * self.buf[p]) + f * w * total;
        }
    }

    fn add_log_domain(&mut self, order: &[usize], log_tail: f64, f: f64) {
        let log_z = pl::log_normalizers_from_tail(self.scores, order, log_tail);
        let d = pl::normalizer_prefix(&log_z);
        let last = order.len() - 1;
        let unplaced = |s: f64| (s - log_z[last]).exp() * d[last];
        let common = unplaced(self.shift);
        let lazy = common.is_finite();
        if lazy {
            self.unplaced += f * common;
        } else {
            // the shared coefficient overflows in shifted units; apply it item by item
            for (i, (g, &s)) in self.grad.iter_mut().zip(self.scores).enumerate() {
                if !order.contains(&i) {
                    *g -= f * unplaced(s);
                }
            }
        }
        for (p, &i) in order.iter().enumerate() {
            let s = self.scores[i];
            let mass = (s - log_z[p]).exp() * d[p];
            self.grad[i] += f * (1.0 - mass);
            if lazy {
                self.grad[i] += f * unplaced(s);
            }
        }
    }

    pub fn finish(mut self) -> Vec<f64> {
        for (g, w) in self.grad.iter_mut().zip(&self.weights) {
            *g -= w * self.unplaced;
        }
        self.grad
    }
}

/// Clicked items of a record with their logging propensities.
fn clicked_with_propensity(
    record: &ClickRecord,
    rho0: &PropensityTable,
) -> Result<Vec<(ItemId, f64)>> {
    record
        .clicked()
        .map(|(d, _)| rho0.require(record.query, d).map(|p| (d, p)))
        .collect()
}

fn reward(clicked: &[(ItemId, f64)], rank_of: impl Fn(ItemId) -> Option<usize>, exam: &ExaminationModel) -> f64 {
    clicked
        .iter()
        .map(|&(d, p)| exam.prob_opt(rank_of(d)) / p)
        .sum()
}

/// Replace rewards by their leave-one-out-centred values when requested.
fn centre(f: &mut [f64], enabled: bool) {
    if !enabled || f.len() < 2 {
        return;
    }
    let total: f64 = f.iter().sum();
    let n = f.len() as f64;
    for x in f.iter_mut() {
        *x -= (total - *x) / (n - 1.0);
    }
}

/// Which policy of the pipeline a two-stage estimator differentiates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Candidate,
    Reranker,
}

/// Mean over `n_mc` pipeline draws of `f * grad log pi(.)` for one record,
/// as a catalog-length vector of partials w.r.t. the chosen stage's scores.
pub fn two_stage_score_grad<R: Rng + ?Sized>(
    pipeline: &TwoStage,
    stage: Stage,
    record: &ClickRecord,
    rho0: &PropensityTable,
    settings: &GradientSettings,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let n_items = pipeline.n_items();
    let clicked = clicked_with_propensity(record, rho0)?;
    if clicked.is_empty() {
        return Ok(vec![0.0; n_items]);
    }
    let mut sampler = pipeline.query_sampler(record.query)?;
    let n = settings.n_mc.max(1);
    // Leave-one-out centring is f_s * n/(n-1) - T/(n-1) with T the reward
    // total, so it needs the plain score-function sum alongside.
    let centred = settings.control_variate && n >= 2;
    let cand_scores = sampler.candidate_scores().to_vec();
    let mut acc = StageAcc::new(&cand_scores, stage, pipeline.k);
    let mut ones = centred.then(|| StageAcc::new(&cand_scores, stage, pipeline.k));
    let mut draw = PipelineDraw::default();
    let mut total = 0.0;
    for _ in 0..n {
        sampler.draw(rng, &mut draw);
        let f = reward(&clicked, |d| draw.display_rank(d), &settings.exam);
        total += f;
        acc.add(&sampler, &draw, f);
        if let Some(o) = ones.as_mut() {
            o.add(&sampler, &draw, 1.0);
        }
    }
    let mut grad = acc.finish();
    if let Some(o) = ones {
        let (a, b) = (n as f64 / (n - 1) as f64, total / (n - 1) as f64);
        for (g, s) in grad.iter_mut().zip(o.finish()) {
            *g = a * *g - b * s;
        }
    }
    for g in grad.iter_mut() {
        *g /= n as f64;
    }
    Ok(grad)
}

/// Running `sum_s f_s * grad log pi(draw_s)` for one stage of a query sampler.
enum StageAcc<'a> {
    Candidate(PrefixGradAcc<'a>),
    Reranker {
        grad: Vec<f64>,
        buf: Vec<f64>,
        sub: Vec<f64>,
    },
}

impl<'a> StageAcc<'a> {
    fn new(cand_scores: &'a [f64], stage: Stage, k: usize) -> Self {
        match stage {
            Stage::Candidate => StageAcc::Candidate(PrefixGradAcc::new(cand_scores)),
            Stage::Reranker => StageAcc::Reranker {
                grad: vec![0.0; cand_scores.len()],
                buf: Vec::with_capacity(k),
                sub: Vec::new(),
            },
        }
    }

    fn add(&mut self, sampler: &QuerySampler, draw: &PipelineDraw, fs: f64) {
        if fs == 0.0 {
            return;
        }
        match self {
            StageAcc::Candidate(acc) => acc.add(&draw.candidates, draw.cand_log_tail, fs),
            StageAcc::Reranker { grad, buf, sub } => {
                let w = |p: usize| sampler.reranker_weight(draw.candidates[p]);
                buf.clear();
                buf.extend(draw.displayed_pos.iter().map(|&p| w(p)));
                let tail = (draw.rer_log_tail - sampler.reranker_shift()).exp();
                if inverse_normalizer_sums(buf, tail) {
                    let total = buf[buf.len() - 1];
                    for &d in &draw.candidates {
                        grad[d] -= fs * sampler.reranker_weight(d) * total;
                    }
                    for (j, &p) in draw.displayed_pos.iter().enumerate() {
                        grad[draw.candidates[p]] += fs * (1.0 - w(p) * buf[j]) + fs * w(p) * total;
                    }
                } else {
                    let scores = sampler.reranker_scores();
                    sub.clear();
                    sub.extend(draw.candidates.iter().map(|&d| scores[d]));
                    let mut acc = PrefixGradAcc::new(sub);
                    acc.add_log_domain(&draw.displayed_pos, draw.rer_log_tail, fs);
                    for (p, g) in acc.finish().into_iter().enumerate() {
                        grad[draw.candidates[p]] += g;
                    }
                }
            }
        }
    }

    fn finish(self) -> Vec<f64> {
        match self {
            StageAcc::Candidate(acc) => acc.finish(),
            StageAcc::Reranker { grad, .. } => grad,
        }
    }
}

/// Single-stage counterpart: `y ~ pi(.|q)` of length `K` over the catalog,
/// reward from display ranks in `y`.
pub fn single_stage_score_grad<R: Rng + ?Sized>(
    policy: &PlPolicy,
    k: usize,
    record: &ClickRecord,
    rho0: &PropensityTable,
    settings: &GradientSettings,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let n_items = policy.model.n_items();
    let clicked = clicked_with_propensity(record, rho0)?;
    if clicked.is_empty() {
        return Ok(vec![0.0; n_items]);
    }
    let scores = policy.catalog_scores(record.query)?;
    let mut sampler = PlSampler::new(&scores);
    let n = settings.n_mc.max(1);
    let mut orders = vec![Vec::with_capacity(k); n];
    let mut tails = Vec::with_capacity(n);
    let mut f: Vec<f64> = orders
        .iter_mut()
        .map(|o| {
            tails.push(sampler.sample(k, rng, o));
            reward(&clicked, |d| o.iter().position(|&x| x == d).map(|p| p + 1), &settings.exam)
        })
        .collect();
    centre(&mut f, settings.control_variate);
    let mut acc = PrefixGradAcc::new(&scores);
    for ((o, &t), &fs) in orders.iter().zip(&tails).zip(&f) {
        acc.add(o, t, fs);
    }
    Ok(acc.finish().into_iter().map(|g| g / n as f64).collect())
}

/// What a batch gradient differentiates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// Two-stage IPS objective w.r.t. one stage of the pipeline.
    TwoStage(Stage),
    /// Single-stage IPS objective of one policy over the full catalog.
    SingleStage(Stage),
}

fn batch_grad(
    pipeline: &TwoStage,
    objective: Objective,
    batch: &[ClickRecord],
    rho0: &PropensityTable,
    settings: &GradientSettings,
    seed: u64,
    record_ids: &[u64],
) -> Result<GradAccumulator> {
    assert_eq!(batch.len(), record_ids.len());
    let policy = match objective {
        Objective::TwoStage(Stage::Candidate) | Objective::SingleStage(Stage::Candidate) => {
            &pipeline.candidate
        }
        _ => &pipeline.reranker,
    };
    let scale = 1.0 / batch.len().max(1) as f64;
    let parts = batch
        .par_iter()
        .zip(record_ids.par_iter())
        .filter(|(r, _)| r.n_clicks() > 0)
        .map(|(r, &id)| -> Result<GradAccumulator> {
            let mut rng = rng::stream(seed, &[id]);
            let g = match objective {
                Objective::TwoStage(stage) => {
                    two_stage_score_grad(pipeline, stage, r, rho0, settings, &mut rng)?
                }
                Objective::SingleStage(_) => {
                    single_stage_score_grad(policy, pipeline.k, r, rho0, settings, &mut rng)?
                }
            };
            let mut acc = GradAccumulator::new(policy.model.dim());
            let items: Vec<ItemId> = (0..g.len()).collect();
            acc.add_score_gradient(&policy.model, policy.temperature(), r.query, &items, &g, scale);
            Ok(acc)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(tree_reduce(parts, &|a: GradAccumulator, b| a.merge(b))
        .unwrap_or_else(|| GradAccumulator::new(policy.model.dim())))
}

/// Batch gradient of the two-stage IPS objective w.r.t. the candidate
/// generator. Record `i` of the batch draws from the stream `(seed, ids[i])`.
pub fn grad_candidate_batch(
    pipeline: &TwoStage,
    batch: &[ClickRecord],
    rho0: &PropensityTable,
    settings: &GradientSettings,
    seed: u64,
    record_ids: &[u64],
) -> Result<GradAccumulator> {
    batch_grad(
        pipeline,
        Objective::TwoStage(Stage::Candidate),
        batch,
        rho0,
        settings,
        seed,
        record_ids,
    )
}

/// Batch gradient of the two-stage IPS objective w.r.t. the re-ranker.
pub fn grad_reranker_batch(
    pipeline: &TwoStage,
    batch: &[ClickRecord],
    rho0: &PropensityTable,
    settings: &GradientSettings,
    seed: u64,
    record_ids: &[u64],
) -> Result<GradAccumulator> {
    batch_grad(
        pipeline,
        Objective::TwoStage(Stage::Reranker),
        batch,
        rho0,
        settings,
        seed,
        record_ids,
    )
}

/// Batch gradient of the single-stage IPS objective for one policy of the pipeline.
pub fn grad_single_stage_batch(
    pipeline: &TwoStage,
    stage: Stage,
    batch: &[ClickRecord],
    rho0: &PropensityTable,
    settings: &GradientSettings,
    seed: u64,
    record_ids: &[u64],
) -> Result<GradAccumulator> {
    batch_grad(
        pipeline,
        Objective::SingleStage(stage),
        batch,
        rho0,
        settings,
        seed,
        record_ids,
    )
}

/// Supervised REINFORCE gradient on true relevance for a set of users:
/// reward `sum_{d in y} exam(k(d)) * rel(q, d)` with `y` of length `k`.
pub fn supervised_grad(
    policy: &PlPolicy,
    rel: &crate::dataset::RelevanceMatrix,
    users: &[UserId],
    k: usize,
    settings: &GradientSettings,
    seed: u64,
) -> Result<GradAccumulator> {
    let scale = 1.0 / users.len().max(1) as f64;
    let parts = users
        .par_iter()
        .enumerate()
        .map(|(i, &q)| -> Result<GradAccumulator> {
            let mut rng = rng::stream(seed, &[i as u64]);
            let scores = policy.catalog_scores(q)?;
            let mut sampler = PlSampler::new(&scores);
            let mut acc = PrefixGradAcc::new(&scores);
            let mut order = Vec::with_capacity(k);
            let n = settings.n_mc.max(1);
            for _ in 0..n {
                let tail = sampler.sample(k, &mut rng, &mut order);
                let f: f64 = order
                    .iter()
                    .enumerate()
                    .map(|(j, &d)| settings.exam.prob(j + 1) * rel.rel(q, d))
                    .sum();
                acc.add(&order, tail, f);
            }
            let g: Vec<f64> = acc.finish().into_iter().map(|x| x / n as f64).collect();
            let items: Vec<ItemId> = (0..g.len()).collect();
            let mut out = GradAccumulator::new(policy.model.dim());
            out.add_score_gradient(&policy.model, policy.temperature(), q, &items, &g, scale);
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(tree_reduce(parts, &|a: GradAccumulator, b| a.merge(b))
        .unwrap_or_else(|| GradAccumulator::new(policy.model.dim())))
}
