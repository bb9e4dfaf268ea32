//! Self-checks against exhaustive enumeration on tiny worlds, runnable
//! from the command line.

use std::collections::HashMap;
use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::clicksim::{exact_propensities, ClickRecord, ExaminationModel, PropensityTable};
use crate::dataset::{FactorModel, RelevanceMatrix};
use crate::error::{Error, Result};
use crate::estimator::{doc_weights_exact, true_utility, Backend};
use crate::policy::{pl, PlPolicy, PlSampler, Ranking, TwoStage};
use crate::reduce::mean_and_se;
use crate::rng;
use crate::trainer::{exact, two_stage_score_grad, GradientSettings, Stage};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Unbiasedness,
    Gradients,
    Sampler,
}

impl std::str::FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unbiasedness" => Ok(Suite::Unbiasedness),
            "gradients" => Ok(Suite::Gradients),
            "sampler" => Ok(Suite::Sampler),
            other => Err(Error::Argument(format!(
                "unknown suite `{other}` (unbiasedness|gradients|sampler)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "[{tag}] {}: {}", self.name, self.detail)
    }
}

pub fn run(suite: Suite, seed: u64) -> Result<Vec<Check>> {
    match suite {
        Suite::Unbiasedness => unbiasedness(seed, 50),
        Suite::Gradients => gradients(seed, 6),
        Suite::Sampler => sampler(seed, 200_000),
    }
}

/// A random single-query world for enumeration checks.
#[derive(Debug, Clone)]
pub struct TinyWorld {
    pub logging: TwoStage,
    pub target: TwoStage,
    pub rel: RelevanceMatrix,
}

fn normal_scores<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn direct(scores: Vec<f64>) -> Result<PlPolicy> {
    PlPolicy::new(FactorModel::with_direct_scores(&[scores]), 1.0)
}

pub fn tiny_world<R: Rng + ?Sized>(rng: &mut R, max_items: usize, max_k2: usize, max_k: usize) -> Result<TinyWorld> {
    let n = rng.random_range(2..=max_items);
    let k2 = rng.random_range(1..=max_k2.min(n));
    let k = rng.random_range(1..=max_k.min(k2));
    let mut pipe = || -> Result<TwoStage> {
        TwoStage::new(direct(normal_scores(n, rng))?, direct(normal_scores(n, rng))?, k2, k)
    };
    let logging = pipe()?;
    let target = pipe()?;
    let row: Vec<u8> = (0..n).map(|_| rng.random_range(0..2u8)).collect();
    Ok(TinyWorld {
        logging,
        target,
        rel: RelevanceMatrix::from_dense(&[row]),
    })
}

/// `E[U_hat]` over every logged ranking pair and click pattern for a
/// one-record log, with exact logging propensities.
pub fn expected_ips(world: &TinyWorld, exam: &ExaminationModel) -> Result<f64> {
    let q = 0;
    let n = world.logging.n_items();
    let rho0 = exact_propensities(&world.logging, q, exam)?;
    let target = doc_weights_exact(&world.target, q, exam)?;
    let catalog: Vec<usize> = (0..n).collect();
    let mut total = 0.0;
    for (yc, pc) in world.logging.candidate.enumerate_rankings(q, &catalog, world.logging.k2)? {
        for (yr, pr) in world.logging.reranker.enumerate_rankings(q, yc.items(), world.logging.k)? {
            let shown = yr.items();
            for mask in 0u32..(1 << shown.len()) {
                let mut p = pc * pr;
                let mut value = 0.0;
                for (j, &d) in shown.iter().enumerate() {
                    let click_p = exam.prob(j + 1) * world.rel.rel(q, d);
                    if mask >> j & 1 == 1 {
                        p *= click_p;
                        value += target.weight(d) / rho0[&d];
                    } else {
                        p *= 1.0 - click_p;
                    }
                }
                total += p * value;
            }
        }
    }
    Ok(total)
}

fn unbiasedness(seed: u64, n_worlds: usize) -> Result<Vec<Check>> {
    let exam = ExaminationModel::default();
    let mut worst: f64 = 0.0;
    for w in 0..n_worlds {
        let mut r = rng::stream(seed, &[rng::label("unbiasedness"), w as u64]);
        let world = tiny_world(&mut r, 5, 4, 2)?;
        let expected = expected_ips(&world, &exam)?;
        let truth = true_utility(&world.target, &world.rel, &[0], &exam, Backend::Exact)?.value;
        worst = worst.max((expected - truth).abs());
    }
    Ok(vec![Check {
        name: format!("E[IPS] = U over {n_worlds} worlds"),
        passed: worst < 1e-10,
        detail: format!("max |E[U_hat] - U| = {worst:.3e}"),
    }])
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

/// Exact IPS value of one record as a function of one stage's scores.
fn record_value(cand: &[f64], rer: &[f64], k2: usize, k: usize, record: &ClickRecord, rho0: &PropensityTable) -> Result<f64> {
    let exam = ExaminationModel::default();
    let (w, _) = exact::weight_jacobian(cand, rer, k2, k, &exam, Stage::Candidate)?;
    record
        .clicked()
        .map(|(d, _)| rho0.require(record.query, d).map(|p| w[d] / p))
        .sum()
}

fn gradients(seed: u64, n_worlds: usize) -> Result<Vec<Check>> {
    let exam = ExaminationModel::default();
    let h = 1e-5;
    let mut worst_fd: f64 = 0.0;
    let mut worst_z: f64 = 0.0;
    for w in 0..n_worlds {
        let mut r = rng::stream(seed, &[rng::label("gradients"), w as u64]);
        let n = r.random_range(4..=5usize);
        let (k2, k) = (3, 2);
        let cand = normal_scores(n, &mut r);
        let rer = normal_scores(n, &mut r);
        let pipeline = TwoStage::new(direct(cand.clone())?, direct(rer.clone())?, k2, k)?;
        let shown = Ranking::new(vec![0, 1])?;
        let record = ClickRecord::new(0, shown, vec![true, r.random_bool(0.5)])?;
        let mut rho0 = PropensityTable::new(0.01)?;
        for d in 0..n {
            rho0.insert(0, d, r.random_range(0.2..1.0));
        }
        for stage in [Stage::Candidate, Stage::Reranker] {
            let g = exact::record_score_grad(&pipeline, stage, &record, &rho0, &exam)?;
            for j in 0..n {
                let (mut cp, mut cm, mut rp, mut rm) = (cand.clone(), cand.clone(), rer.clone(), rer.clone());
                match stage {
                    Stage::Candidate => {
                        cp[j] += h;
                        cm[j] -= h;
                    }
                    Stage::Reranker => {
                        rp[j] += h;
                        rm[j] -= h;
                    }
                }
                let fd = (record_value(&cp, &rp, k2, k, &record, &rho0)?
                    - record_value(&cm, &rm, k2, k, &record, &rho0)?)
                    / (2.0 * h);
                worst_fd = worst_fd.max(rel_err(g[j], fd));
            }
            // batch means of the Monte-Carlo estimator
            let settings = GradientSettings {
                n_mc: 200,
                exam,
                control_variate: false,
            };
            let mut chunks: Vec<Vec<f64>> = Vec::new();
            for c in 0..100u64 {
                let mut cr = rng::stream(seed, &[rng::label("gradients_mc"), w as u64, c]);
                chunks.push(two_stage_score_grad(&pipeline, stage, &record, &rho0, &settings, &mut cr)?);
            }
            for j in 0..n {
                let col: Vec<f64> = chunks.iter().map(|c| c[j]).collect();
                let (m, se) = mean_and_se(&col);
                let z = (m - g[j]).abs() / se.max(1e-12);
                worst_z = worst_z.max(if (m - g[j]).abs() < 1e-12 { 0.0 } else { z });
            }
        }
    }
    Ok(vec![
        Check {
            name: "exact gradient vs central differences".into(),
            passed: worst_fd < 1e-6,
            detail: format!("max relative error {worst_fd:.3e}"),
        },
        Check {
            name: "Monte-Carlo gradient at 20k draws vs exact".into(),
            passed: worst_z <= 3.0,
            detail: format!("max |z| = {worst_z:.2}"),
        },
    ])
}

/// Pearson statistic, its 0.001 critical value and total variation of
/// top-2 frequencies over 4 items against exact probabilities.
pub fn sampler_fit(counts: &HashMap<Vec<usize>, u64>, scores: &[f64], l: usize, n: u64) -> (f64, f64, f64) {
    let prefixes = pl::ordered_prefixes(scores.len(), l);
    let mut chi2 = 0.0;
    let mut tv = 0.0;
    for o in &prefixes {
        let p = pl::log_prob(scores, o).exp();
        let observed = counts.get(o).copied().unwrap_or(0) as f64;
        let expected = p * n as f64;
        chi2 += (observed - expected).powi(2) / expected;
        tv += (observed / n as f64 - p).abs();
    }
    let df = (prefixes.len() - 1) as f64;
    let critical = ChiSquared::new(df).expect("df > 0").inverse_cdf(0.999);
    (chi2, critical, tv / 2.0)
}

fn sampler(seed: u64, n: u64) -> Result<Vec<Check>> {
    let scores = [0.8, -0.3, 0.1, 1.4];
    let mut tree_counts = HashMap::new();
    let mut gumbel_counts = HashMap::new();
    let mut r = rng::stream(seed, &[rng::label("sampler")]);
    let mut s = PlSampler::new(&scores);
    let mut order = Vec::new();
    for _ in 0..n {
        s.sample(2, &mut r, &mut order);
        *tree_counts.entry(order.clone()).or_insert(0) += 1;
        *gumbel_counts.entry(pl::gumbel_top_k(&scores, 2, &mut r)).or_insert(0) += 1;
    }
    let mut out = Vec::new();
    for (name, counts) in [("sum-tree sampler", &tree_counts), ("Gumbel top-k", &gumbel_counts)] {
        let (chi2, critical, tv) = sampler_fit(counts, &scores, 2, n);
        out.push(Check {
            name: format!("{name} frequencies over {n} draws"),
            passed: chi2 < critical && tv < 0.01,
            detail: format!("chi2 {chi2:.2} (critical {critical:.2}), TV {tv:.4}"),
        });
    }
    Ok(out)
}
