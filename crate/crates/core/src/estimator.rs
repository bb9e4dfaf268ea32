//! Two-stage document weights, the IPS objective, the true two-stage
//! utility and NDCG@10, each with a Monte-Carlo and (for tiny catalogs) an
//! exhaustive-enumeration backend.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use rayon::prelude::*;

use crate::clicksim::{exact_propensities, ClickLog, ExaminationModel, PropensityTable};
use crate::dataset::RelevanceMatrix;
use crate::error::{Error, Result};
use crate::policy::{PipelineDraw, PlPolicy, PlSampler, TwoStage, ENUMERATION_LIMIT};
use crate::reduce::{tree_mean, tree_sum};
use crate::{rng, ItemId, UserId};

/// Expected examination weight `E_{y_c} E_{y_r} [exam(k(d))]` per item for
/// one query. Items never displayed are absent (weight 0).
#[derive(Debug, Clone, PartialEq)]
pub struct DocWeightEstimate {
    pub query: UserId,
    pub weights: BTreeMap<ItemId, f64>,
    /// 0 for the exact backend.
    pub n_samples: usize,
    pub std_err: BTreeMap<ItemId, f64>,
}

impl DocWeightEstimate {
    pub fn weight(&self, d: ItemId) -> f64 {
        self.weights.get(&d).copied().unwrap_or(0.0)
    }

    pub fn std_err(&self, d: ItemId) -> f64 {
        self.std_err.get(&d).copied().unwrap_or(0.0)
    }

    pub fn total(&self) -> f64 {
        self.weights.values().sum()
    }
}

/// A utility value and the per-record (or per-user) terms it averages.
#[derive(Debug, Clone, PartialEq)]
pub struct UtilityEstimate {
    pub value: f64,
    pub contributions: Vec<f64>,
}

impl UtilityEstimate {
    pub fn from_contributions(contributions: Vec<f64>) -> Self {
        Self {
            value: tree_mean(&contributions),
            contributions,
        }
    }
}

/// How expectations over `(y_c, y_r)` are computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Backend {
    Exact,
    MonteCarlo { n_samples: usize, seed: u64 },
}

fn check_samples(n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::Argument("need at least one Monte-Carlo sample".into()));
    }
    Ok(())
}

pub fn doc_weights_mc<R: Rng + ?Sized>(
    pipeline: &TwoStage,
    query: UserId,
    n_samples: usize,
    exam: &ExaminationModel,
    rng: &mut R,
) -> Result<DocWeightEstimate> {
    check_samples(n_samples)?;
    let mut sampler = pipeline.query_sampler(query)?;
    let mut draw = PipelineDraw::default();
    let mut sums: HashMap<ItemId, (f64, f64)> = HashMap::new();
    for _ in 0..n_samples {
        sampler.draw(rng, &mut draw);
        for (j, d) in draw.displayed().enumerate() {
            let w = exam.prob(j + 1);
            if w > 0.0 {
                let e = sums.entry(d).or_insert((0.0, 0.0));
                e.0 += w;
                e.1 += w * w;
            }
        }
    }
    Ok(finish_weights(query, sums, n_samples))
}

fn finish_weights(query: UserId, sums: HashMap<ItemId, (f64, f64)>, n_samples: usize) -> DocWeightEstimate {
    let n = n_samples as f64;
    let mut weights = BTreeMap::new();
    let mut std_err = BTreeMap::new();
    for (d, (s, s2)) in sums {
        let mean = s / n;
        let var = if n_samples > 1 {
            ((s2 - n * mean * mean) / (n - 1.0)).max(0.0)
        } else {
            0.0
        };
        weights.insert(d, mean);
        std_err.insert(d, (var / n).sqrt());
    }
    DocWeightEstimate {
        query,
        weights,
        n_samples,
        std_err,
    }
}

/// Weights of a single policy placing `k` items from the whole catalog.
pub fn doc_weights_single_stage_mc<R: Rng + ?Sized>(
    policy: &PlPolicy,
    query: UserId,
    k: usize,
    n_samples: usize,
    exam: &ExaminationModel,
    rng: &mut R,
) -> Result<DocWeightEstimate> {
    check_samples(n_samples)?;
    let scores = policy.catalog_scores(query)?;
    if k == 0 || k > scores.len() {
        return Err(Error::Argument(format!("list length {k} for {} items", scores.len())));
    }
    let mut sampler = PlSampler::new(&scores);
    let mut order = Vec::with_capacity(k);
    let mut sums: HashMap<ItemId, (f64, f64)> = HashMap::new();
    for _ in 0..n_samples {
        sampler.sample(k, rng, &mut order);
        for (j, &d) in order.iter().enumerate() {
            let w = exam.prob(j + 1);
            if w > 0.0 {
                let e = sums.entry(d).or_insert((0.0, 0.0));
                e.0 += w;
                e.1 += w * w;
            }
        }
    }
    Ok(finish_weights(query, sums, n_samples))
}

pub fn doc_weights_exact(
    pipeline: &TwoStage,
    query: UserId,
    exam: &ExaminationModel,
) -> Result<DocWeightEstimate> {
    let all = exact_propensities(pipeline, query, exam)?;
    let weights: BTreeMap<ItemId, f64> = all.into_iter().filter(|(_, w)| *w > 0.0).collect();
    let std_err = weights.keys().map(|&d| (d, 0.0)).collect();
    Ok(DocWeightEstimate {
        query,
        weights,
        n_samples: 0,
        std_err,
    })
}

/// Document weights under `backend`, with the MC stream derived per query.
pub fn doc_weights(
    pipeline: &TwoStage,
    query: UserId,
    exam: &ExaminationModel,
    backend: Backend,
) -> Result<DocWeightEstimate> {
    match backend {
        Backend::Exact => doc_weights_exact(pipeline, query, exam),
        Backend::MonteCarlo { n_samples, seed } => {
            let mut rng = rng::stream(seed, &[rng::label("doc_weights"), query as u64]);
            doc_weights_mc(pipeline, query, n_samples, exam, &mut rng)
        }
    }
}

/// `(1/N) sum_i sum_{clicked d} rho(d | q_i) / rho0(q_i, d)`.
///
/// Weights are requested once per distinct query of the log.
pub fn ips_utility(
    log: &ClickLog,
    weights_fn: &(dyn Fn(UserId) -> Result<DocWeightEstimate> + Sync),
    rho0: &PropensityTable,
) -> Result<UtilityEstimate> {
    if log.is_empty() {
        return Err(Error::Argument("IPS utility of an empty log".into()));
    }
    let mut queries: Vec<UserId> = log
        .records
        .iter()
        .filter(|r| r.n_clicks() > 0)
        .map(|r| r.query)
        .collect();
    queries.sort_unstable();
    queries.dedup();
    let weights: HashMap<UserId, DocWeightEstimate> = queries
        .par_iter()
        .map(|&q| weights_fn(q).map(|w| (q, w)))
        .collect::<Result<_>>()?;
    let contributions = log
        .records
        .iter()
        .map(|r| {
            r.clicked()
                .map(|(d, _)| {
                    let p = rho0.require(r.query, d)?;
                    Ok(weights[&r.query].weight(d) / p)
                })
                .sum::<Result<f64>>()
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(UtilityEstimate::from_contributions(contributions))
}

/// `sum_d rho(d | q) rel(q, d)` for one query.
fn query_utility(
    pipeline: &TwoStage,
    rel: &RelevanceMatrix,
    q: UserId,
    exam: &ExaminationModel,
    backend: Backend,
) -> Result<f64> {
    match backend {
        Backend::Exact => {
            let w = doc_weights_exact(pipeline, q, exam)?;
            Ok(w.weights.iter().map(|(&d, &x)| x * rel.rel(q, d)).sum())
        }
        Backend::MonteCarlo { n_samples, seed } => {
            check_samples(n_samples)?;
            let mut rng = rng::stream(seed, &[rng::label("true_utility"), q as u64]);
            let mut sampler = pipeline.query_sampler(q)?;
            let mut draw = PipelineDraw::default();
            let mut per = Vec::with_capacity(n_samples);
            for _ in 0..n_samples {
                sampler.draw(&mut rng, &mut draw);
                per.push(
                    draw.displayed()
                        .enumerate()
                        .map(|(j, d)| exam.prob(j + 1) * rel.rel(q, d))
                        .sum(),
                );
            }
            Ok(tree_mean(&per))
        }
    }
}

/// The two-stage utility with true relevance, averaged over `users`.
pub fn true_utility(
    pipeline: &TwoStage,
    rel: &RelevanceMatrix,
    users: &[UserId],
    exam: &ExaminationModel,
    backend: Backend,
) -> Result<UtilityEstimate> {
    if users.is_empty() {
        return Err(Error::Argument("true utility over an empty user set".into()));
    }
    let contributions = users
        .par_iter()
        .map(|&q| query_utility(pipeline, rel, q, exam, backend))
        .collect::<Result<Vec<f64>>>()?;
    Ok(UtilityEstimate::from_contributions(contributions))
}

pub const NDCG_CUTOFF: usize = 10;

/// DCG@10 of `displayed` divided by the ideal DCG@10 of the user.
pub fn ndcg_of_list(
    rel: &RelevanceMatrix,
    q: UserId,
    displayed: impl IntoIterator<Item = ItemId>,
) -> Option<f64> {
    let n_rel = rel.relevant_items(q).len();
    if n_rel == 0 {
        return None;
    }
    let discount = |j: usize| 1.0 / ((j + 1) as f64 + 1.0).log2();
    let ideal: f64 = (0..n_rel.min(NDCG_CUTOFF)).map(discount).sum();
    let dcg: f64 = displayed
        .into_iter()
        .take(NDCG_CUTOFF)
        .enumerate()
        .map(|(j, d)| rel.rel(q, d) * discount(j))
        .sum();
    Some(dcg / ideal)
}

#[derive(Debug, Clone, PartialEq)]
pub struct NdcgReport {
    /// Mean over scored users.
    pub mean: f64,
    /// `(user, ndcg)` for users with at least one relevant item.
    pub per_user: Vec<(UserId, f64)>,
    /// Users without relevant items, excluded from the mean.
    pub skipped: usize,
}

fn query_ndcg(pipeline: &TwoStage, rel: &RelevanceMatrix, q: UserId, backend: Backend) -> Result<f64> {
    match backend {
        Backend::Exact => {
            let n = pipeline.n_items();
            if n > ENUMERATION_LIMIT {
                return Err(Error::TooLarge {
                    size: n,
                    limit: ENUMERATION_LIMIT,
                });
            }
            let catalog: Vec<ItemId> = (0..n).collect();
            let mut total = 0.0;
            for (yc, pc) in pipeline.candidate.enumerate_rankings(q, &catalog, pipeline.k2)? {
                for (yr, pr) in pipeline.reranker.enumerate_rankings(q, yc.items(), pipeline.k)? {
                    total += pc * pr * ndcg_of_list(rel, q, yr.items().iter().copied()).unwrap_or(0.0);
                }
            }
            Ok(total)
        }
        Backend::MonteCarlo { n_samples, seed } => {
            check_samples(n_samples)?;
            let mut rng = rng::stream(seed, &[rng::label("ndcg"), q as u64]);
            let mut sampler = pipeline.query_sampler(q)?;
            let mut draw = PipelineDraw::default();
            let mut per = Vec::with_capacity(n_samples);
            for _ in 0..n_samples {
                sampler.draw(&mut rng, &mut draw);
                per.push(ndcg_of_list(rel, q, draw.displayed()).unwrap_or(0.0));
            }
            Ok(tree_mean(&per))
        }
    }
}

/// NDCG@10 of the sampled pipeline, averaged over samples then users.
pub fn ndcg_at_10(
    pipeline: &TwoStage,
    rel: &RelevanceMatrix,
    eval_users: &[UserId],
    backend: Backend,
) -> Result<NdcgReport> {
    let scored: Vec<UserId> = eval_users
        .iter()
        .copied()
        .filter(|&q| !rel.relevant_items(q).is_empty())
        .collect();
    let per_user = scored
        .par_iter()
        .map(|&q| query_ndcg(pipeline, rel, q, backend).map(|v| (q, v)))
        .collect::<Result<Vec<_>>>()?;
    let values: Vec<f64> = per_user.iter().map(|x| x.1).collect();
    Ok(NdcgReport {
        mean: tree_mean(&values),
        skipped: eval_users.len() - scored.len(),
        per_user,
    })
}

/// Sum of the weights of `est`, a quick slot-mass diagnostic.
pub fn slot_mass(est: &DocWeightEstimate) -> f64 {
    let v: Vec<f64> = est.weights.values().copied().collect();
    tree_sum(&v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clicksim::ClickRecord;
    use crate::dataset::FactorModel;
    use crate::policy::{PlPolicy, Ranking};

    fn direct(c: Vec<Vec<f64>>, r: Vec<Vec<f64>>, k2: usize, k: usize, t: f64) -> TwoStage {
        TwoStage::new(
            PlPolicy::new(FactorModel::with_direct_scores(&c), t).unwrap(),
            PlPolicy::new(FactorModel::with_direct_scores(&r), t).unwrap(),
            k2,
            k,
        )
        .unwrap()
    }

    fn exam() -> ExaminationModel {
        ExaminationModel::default()
    }

    #[test]
    fn single_item_weight_is_one() {
        let tp = direct(vec![vec![0.3]], vec![vec![-2.0]], 1, 1, 1.0);
        let mut rng = rng::stream(0, &[]);
        for n in [1, 7, 300] {
            let w = doc_weights_mc(&tp, 0, n, &exam(), &mut rng).unwrap();
            assert_eq!(w.weight(0), 1.0);
        }
        assert_eq!(doc_weights_exact(&tp, 0, &exam()).unwrap().weight(0), 1.0);
    }

    #[test]
    fn symmetric_weights() {
        let tp = direct(vec![vec![0.0; 3]], vec![vec![0.0; 3]], 3, 1, 1.0);
        let mut rng = rng::stream(1, &[]);
        let w = doc_weights_mc(&tp, 0, 30_000, &exam(), &mut rng).unwrap();
        for d in 0..3 {
            assert!((w.weight(d) - 1.0 / 3.0).abs() < 3.0 * w.std_err(d));
        }
    }

    #[test]
    fn mc_agrees_with_enumeration() {
        let tp = direct(vec![vec![0.8, -0.5, 0.2, 1.1]], vec![vec![0.1, 0.9, -0.4, 0.3]], 3, 2, 1.0);
        let ex = doc_weights_exact(&tp, 0, &exam()).unwrap();
        let mut rng = rng::stream(2, &[]);
        let mc = doc_weights_mc(&tp, 0, 10_000, &exam(), &mut rng).unwrap();
        for d in 0..4 {
            assert!(
                (mc.weight(d) - ex.weight(d)).abs() < 3.0 * mc.std_err(d),
                "item {d}: {} vs {}",
                mc.weight(d),
                ex.weight(d)
            );
        }
        assert!((slot_mass(&ex) - exam().slot_mass(2)).abs() < 1e-12);
        assert!(matches!(
            doc_weights_mc(&tp, 0, 0, &exam(), &mut rng),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn full_candidate_set_reduces_to_single_stage_reranker() {
        // K2 = n: the candidate set is the whole catalog, so only the re-ranker matters.
        let r = vec![0.4, -0.3, 1.0, 0.2];
        let tp = direct(vec![vec![2.0, 0.0, -1.0, 0.5]], vec![r.clone()], 4, 2, 1.0);
        let ex = doc_weights_exact(&tp, 0, &exam()).unwrap();
        let single = PlPolicy::new(FactorModel::with_direct_scores(&[r]), 1.0).unwrap();
        let mut expect = [0.0; 4];
        for (y, p) in single.enumerate_rankings(0, &[0, 1, 2, 3], 2).unwrap() {
            for (j, &d) in y.items().iter().enumerate() {
                expect[d] += p * exam().prob(j + 1);
            }
        }
        for d in 0..4 {
            assert!((ex.weight(d) - expect[d]).abs() < 1e-12);
        }
    }

    fn log_of(records: Vec<(UserId, Vec<ItemId>, Vec<bool>)>) -> ClickLog {
        ClickLog {
            records: records
                .into_iter()
                .map(|(q, y, c)| ClickRecord::new(q, Ranking::new(y).unwrap(), c).unwrap())
                .collect(),
        }
    }

    #[test]
    fn ips_zero_clicks_and_linearity() {
        let tp = direct(vec![vec![0.1, 0.2, 0.3]], vec![vec![0.0, 0.5, -0.5]], 2, 2, 1.0);
        let wf = |q| doc_weights_exact(&tp, q, &exam());
        let quiet = log_of(vec![(0, vec![0, 1], vec![false, false])]);
        let rho = crate::clicksim::estimate_propensities(&quiet, &exam(), 0.01).unwrap();
        assert_eq!(ips_utility(&quiet, &wf, &rho).unwrap().value, 0.0);

        let clicked = log_of(vec![
            (0, vec![0, 1], vec![true, false]),
            (0, vec![2, 1], vec![false, true]),
        ]);
        let rho = crate::clicksim::estimate_propensities(&clicked, &exam(), 0.01).unwrap();
        let a = ips_utility(&clicked, &wf, &rho).unwrap();
        let b = ips_utility(&clicked, &wf, &rho.scaled(2.0)).unwrap();
        assert!((a.value - 2.0 * b.value).abs() < 1e-12);
        assert_eq!(a.contributions.len(), 2);
        assert!((a.value - tree_mean(&a.contributions)).abs() < 1e-15);
    }

    #[test]
    fn ips_missing_propensity_is_integrity_error() {
        let tp = direct(vec![vec![0.1, 0.2, 0.3]], vec![vec![0.0, 0.5, -0.5]], 2, 2, 1.0);
        let wf = |q| doc_weights_exact(&tp, q, &exam());
        let clicked = log_of(vec![(0, vec![0, 1], vec![true, false])]);
        let empty = PropensityTable::new(0.1).unwrap();
        assert!(matches!(ips_utility(&clicked, &wf, &empty), Err(Error::Integrity(_))));
    }

    #[test]
    fn true_utility_edge_cases() {
        let n = 12;
        let tp = direct(vec![vec![0.0; n]; 2], vec![vec![0.3; n]; 2], 11, 10, 1.0);
        let none = RelevanceMatrix::from_positives(n, vec![vec![]; 2]);
        let all = RelevanceMatrix::from_positives(n, vec![(0..n).collect(); 2]);
        let mc = Backend::MonteCarlo { n_samples: 20, seed: 4 };
        assert_eq!(true_utility(&tp, &none, &[0, 1], &exam(), mc).unwrap().value, 0.0);
        let h10: f64 = (1..=10).map(|k| 1.0 / k as f64).sum();
        assert!((h10 - 2.928968).abs() < 1e-6);
        let v = true_utility(&tp, &all, &[0, 1], &exam(), mc).unwrap().value;
        assert!((v - h10).abs() < 1e-12);
    }

    #[test]
    fn true_utility_exact_matches_enumeration() {
        let tp = direct(
            vec![vec![0.5, -0.2, 0.9, 0.0], vec![0.1, 0.4, -0.6, 1.2]],
            vec![vec![-0.1, 0.7, 0.3, 0.2], vec![0.0, -0.9, 0.8, 0.5]],
            3,
            2,
            1.0,
        );
        let rel = RelevanceMatrix::from_positives(4, vec![vec![0, 2], vec![3]]);
        let mut expect = 0.0;
        for q in 0..2 {
            for (yc, pc) in tp.candidate.enumerate_rankings(q, &[0, 1, 2, 3], 3).unwrap() {
                for (yr, pr) in tp.reranker.enumerate_rankings(q, yc.items(), 2).unwrap() {
                    for (j, &d) in yr.items().iter().enumerate() {
                        expect += 0.5 * pc * pr * rel.rel(q, d) / (j + 1) as f64;
                    }
                }
            }
        }
        let got = true_utility(&tp, &rel, &[0, 1], &exam(), Backend::Exact).unwrap().value;
        assert!((got - expect).abs() < 1e-10);
    }

    #[test]
    fn ndcg_perfect_and_empty_lists() {
        let rel = RelevanceMatrix::from_positives(20, vec![(0..12).collect(), vec![]]);
        assert_eq!(ndcg_of_list(&rel, 0, 0..10), Some(1.0));
        assert_eq!(ndcg_of_list(&rel, 0, 12..20), Some(0.0));
        assert_eq!(ndcg_of_list(&rel, 1, 0..10), None);
    }

    #[test]
    fn ndcg_exact_three_item_world() {
        let tp = direct(vec![vec![0.3, -0.4, 0.8]], vec![vec![1.0, 0.0, -0.5]], 2, 2, 1.0);
        let rel = RelevanceMatrix::from_positives(3, vec![vec![1, 2]]);
        let disc = |j: usize| 1.0 / ((j + 2) as f64).log2();
        let ideal = disc(0) + disc(1);
        let mut expect = 0.0;
        for (yc, pc) in tp.candidate.enumerate_rankings(0, &[0, 1, 2], 2).unwrap() {
            for (yr, pr) in tp.reranker.enumerate_rankings(0, yc.items(), 2).unwrap() {
                let dcg: f64 = yr.items().iter().enumerate().map(|(j, &d)| rel.rel(0, d) * disc(j)).sum();
                expect += pc * pr * dcg / ideal;
            }
        }
        let r = ndcg_at_10(&tp, &rel, &[0], Backend::Exact).unwrap();
        assert!((r.mean - expect).abs() < 1e-10);
        assert_eq!(r.skipped, 0);
    }

    #[test]
    fn sorted_cold_pipeline_dominates_sampled_one() {
        let rel = RelevanceMatrix::from_positives(6, vec![vec![1, 4], vec![0, 2, 5], vec![]]);
        let ideal: Vec<Vec<f64>> = (0..3)
            .map(|q| (0..6).map(|d| rel.rel(q, d) * 3.0 - d as f64 * 0.1).collect())
            .collect();
        let cold = direct(ideal.clone(), ideal, 4, 3, 1e-3);
        let warm = direct(
            vec![vec![0.2, -0.1, 0.5, 0.0, 0.3, -0.4]; 3],
            vec![vec![0.0, 0.6, -0.2, 0.1, 0.4, 0.3]; 3],
            4,
            3,
            1.0,
        );
        let mc = Backend::MonteCarlo { n_samples: 200, seed: 8 };
        let a = ndcg_at_10(&cold, &rel, &[0, 1, 2], mc).unwrap();
        let b = ndcg_at_10(&warm, &rel, &[0, 1, 2], mc).unwrap();
        assert!((a.mean - 1.0).abs() < 1e-9);
        assert!(a.mean >= b.mean);
        assert_eq!(a.skipped, 1);
        assert!(b.per_user.iter().all(|(_, v)| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn mc_standard_error_shrinks_as_inverse_root_n() {
        let tp = direct(vec![vec![0.2, 0.0, -0.3, 0.5, 0.1]], vec![vec![0.4, -0.1, 0.0, 0.2, 0.3]], 4, 2, 1.0);
        let ns = [100usize, 400, 1600, 6400];
        // Average the SE over a few repetitions to stabilize the slope.
        let pts: Vec<(f64, f64)> = ns
            .iter()
            .map(|&n| {
                let se: f64 = (0..20)
                    .map(|rep| {
                        let mut rng = rng::stream(77, &[n as u64, rep]);
                        doc_weights_mc(&tp, 0, n, &exam(), &mut rng).unwrap().std_err(3)
                    })
                    .sum::<f64>()
                    / 20.0;
                ((n as f64).ln(), se.ln())
            })
            .collect();
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / 4.0;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / 4.0;
        let slope = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>()
            / pts.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
        assert!((slope + 0.5).abs() < 0.05, "slope {slope}");
    }
}
