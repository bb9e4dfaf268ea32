//! Exhaustive-enumeration gradients of the IPS objective for tiny catalogs.
//! These are the reference values the Monte-Carlo estimators are checked
//! against; they never run during real training.

use crate::clicksim::{ClickRecord, ExaminationModel, PropensityTable};
use crate::error::{Error, Result};
use crate::policy::{pl, TwoStage, ENUMERATION_LIMIT};

use super::gradients::Stage;

fn guard(n: usize) -> Result<()> {
    if n > ENUMERATION_LIMIT {
        return Err(Error::TooLarge {
            size: n,
            limit: ENUMERATION_LIMIT,
        });
    }
    Ok(())
}

/// Exact weights `rho(d)` and their partials w.r.t. the chosen stage's
/// scores: `(weights[d], jac[d][j])`.
pub fn weight_jacobian(
    cand: &[f64],
    rer: &[f64],
    k2: usize,
    k: usize,
    exam: &ExaminationModel,
    stage: Stage,
) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let n = cand.len();
    guard(n)?;
    if rer.len() != n || k == 0 || k > k2 || k2 > n {
        return Err(Error::Argument(format!("bad pipeline shape n={n} K2={k2} K={k}")));
    }
    let mut weights = vec![0.0; n];
    let mut jac = vec![vec![0.0; n]; n];
    for yc in pl::ordered_prefixes(n, k2) {
        let pc = pl::log_prob(cand, &yc).exp();
        let gc = pl::grad_log_prob(cand, &yc);
        let sub: Vec<f64> = yc.iter().map(|&d| rer[d]).collect();
        for pos in pl::ordered_prefixes(k2, k) {
            let pr = pl::log_prob(&sub, &pos).exp();
            let g = match stage {
                Stage::Candidate => gc.clone(),
                Stage::Reranker => {
                    let mut full = vec![0.0; n];
                    for (p, x) in pl::grad_log_prob(&sub, &pos).into_iter().enumerate() {
                        full[yc[p]] = x;
                    }
                    full
                }
            };
            for (j, &p) in pos.iter().enumerate() {
                let d = yc[p];
                let w = pc * pr * exam.prob(j + 1);
                weights[d] += w;
                for (acc, gj) in jac[d].iter_mut().zip(&g) {
                    *acc += w * gj;
                }
            }
        }
    }
    Ok((weights, jac))
}

/// Exact gradient of one record's IPS term w.r.t. one stage's scores for
/// that record's query.
pub fn record_score_grad(
    pipeline: &TwoStage,
    stage: Stage,
    record: &ClickRecord,
    rho0: &PropensityTable,
    exam: &ExaminationModel,
) -> Result<Vec<f64>> {
    let cand = pipeline.candidate.catalog_scores(record.query)?;
    let rer = pipeline.reranker.catalog_scores(record.query)?;
    let (_, jac) = weight_jacobian(&cand, &rer, pipeline.k2, pipeline.k, exam, stage)?;
    let mut out = vec![0.0; cand.len()];
    for (d, _) in record.clicked() {
        let p = rho0.require(record.query, d)?;
        for (o, g) in out.iter_mut().zip(&jac[d]) {
            *o += g / p;
        }
    }
    Ok(out)
}

/// Exact single-stage weights and Jacobian for a top-`k` list drawn from
/// `scores` over the whole catalog.
pub fn single_stage_weight_jacobian(
    scores: &[f64],
    k: usize,
    exam: &ExaminationModel,
) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let n = scores.len();
    guard(n)?;
    let mut weights = vec![0.0; n];
    let mut jac = vec![vec![0.0; n]; n];
    for y in pl::ordered_prefixes(n, k) {
        let p = pl::log_prob(scores, &y).exp();
        let g = pl::grad_log_prob(scores, &y);
        for (j, &d) in y.iter().enumerate() {
            let w = p * exam.prob(j + 1);
            weights[d] += w;
            for (acc, gj) in jac[d].iter_mut().zip(&g) {
                *acc += w * gj;
            }
        }
    }
    Ok((weights, jac))
}

/// Exact single-stage counterpart of [`record_score_grad`].
pub fn single_stage_record_grad(
    scores: &[f64],
    k: usize,
    record: &ClickRecord,
    rho0: &PropensityTable,
    exam: &ExaminationModel,
) -> Result<Vec<f64>> {
    let (_, jac) = single_stage_weight_jacobian(scores, k, exam)?;
    let mut out = vec![0.0; scores.len()];
    for (d, _) in record.clicked() {
        let p = rho0.require(record.query, d)?;
        for (o, g) in out.iter_mut().zip(&jac[d]) {
            *o += g / p;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_sum_to_slot_mass() {
        let exam = ExaminationModel::default();
        let (w, jac) =
            weight_jacobian(&[0.1, 0.5, -0.2, 1.0, 0.3], &[0.0, -1.0, 0.4, 0.2, 0.9], 3, 2, &exam, Stage::Candidate)
                .unwrap();
        assert!((w.iter().sum::<f64>() - 1.5).abs() < 1e-12);
        // the total is constant in the scores, so its gradient vanishes
        for j in 0..5 {
            let col: f64 = jac.iter().map(|row| row[j]).sum();
            assert!(col.abs() < 1e-12);
        }
    }

    #[test]
    fn refuses_large_catalogs() {
        let s = vec![0.0; ENUMERATION_LIMIT + 1];
        assert!(matches!(
            single_stage_weight_jacobian(&s, 2, &ExaminationModel::default()),
            Err(Error::TooLarge { .. })
        ));
    }
}
