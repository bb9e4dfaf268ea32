//! Policy-gradient training of the two-stage pipeline from a click log.
//!
//! Three regimes are supported:
//!
//! * `baseline`: a re-ranker is pre-trained on the clicks for a fixed number
//!   of epochs and frozen, then the candidate generator is trained with the
//!   two-stage objective against it.
//! * `independent`: each stage is trained with the single-stage objective
//!   over the whole catalog, ignoring the other, and the two are composed.
//! * `joint`: minibatches alternate between candidate-generator and
//!   re-ranker updates, both with two-stage gradients.
//!
//! Every phase keeps the snapshot with the best IPS value on a held-out
//! slice of the log and stops after `patience` epochs without improvement.

mod adam;
pub mod exact;
mod gradients;

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::clicksim::{ClickLog, ClickRecord, ExaminationModel, PropensityTable};
use crate::dataset::{FactorModel, RelevanceMatrix};
use crate::error::{Error, Result};
use crate::estimator::{self, doc_weights, doc_weights_single_stage_mc, ips_utility, Backend};
use crate::policy::{PlPolicy, TwoStage};
use crate::{rng, UserId};

pub use adam::OptimizerState;
pub use gradients::{
    grad_candidate_batch, grad_reranker_batch, grad_single_stage_batch, single_stage_score_grad,
    supervised_grad, two_stage_score_grad, GradAccumulator, GradientSettings, Objective,
    PrefixGradAcc, Stage,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Baseline,
    Independent,
    Joint,
}

impl Regime {
    pub const ALL: [Regime; 3] = [Regime::Baseline, Regime::Independent, Regime::Joint];

    pub fn name(self) -> &'static str {
        match self {
            Regime::Baseline => "baseline",
            Regime::Independent => "independent",
            Regime::Joint => "joint",
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "baseline" => Ok(Regime::Baseline),
            "independent" => Ok(Regime::Independent),
            "joint" => Ok(Regime::Joint),
            other => Err(Error::Config(format!("unknown regime `{other}`"))),
        }
    }
}

/// How the baseline's frozen re-ranker is pre-trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RerankerPretraining {
    /// Single-stage objective with the whole catalog as support.
    SingleStage,
    /// Two-stage objective behind the logging pipeline's candidate generator.
    LoggingCandidates,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub regime: Regime,
    pub k2: usize,
    pub k: usize,
    /// Pipeline draws per record for each gradient.
    pub n_mc: usize,
    pub batch_size: usize,
    /// Upper bound on epochs per phase.
    pub max_epochs: usize,
    pub patience: usize,
    /// Trailing fraction of the log held out for early stopping.
    pub validation_frac: f64,
    pub learning_rate: f64,
    /// Defaults to `1 / k2` when unset.
    pub propensity_floor: Option<f64>,
    /// Epochs of the baseline's re-ranker pre-training.
    pub pretrain_epochs: usize,
    pub reranker_pretraining: RerankerPretraining,
    pub control_variate: bool,
    /// Draws per query when estimating document weights for the IPS value.
    pub eval_samples: usize,
    /// Record NDCG@10 in the history every this many epochs (0: never).
    pub ndcg_every: usize,
    pub ndcg_samples: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            regime: Regime::Joint,
            k2: 100,
            k: 10,
            n_mc: 300,
            batch_size: 32,
            max_epochs: 20,
            patience: 5,
            validation_frac: 0.1,
            learning_rate: 0.01,
            propensity_floor: None,
            pretrain_epochs: 5,
            reranker_pretraining: RerankerPretraining::SingleStage,
            control_variate: false,
            eval_samples: 300,
            ndcg_every: 0,
            ndcg_samples: 50,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_mc == 0 {
            return bad("n_mc must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.k == 0 || self.k > self.k2 {
            return bad(format!("need 1 <= K ({}) <= K2 ({})", self.k, self.k2));
        }
        if !(0.0..1.0).contains(&self.validation_frac) {
            return bad(format!("validation_frac {} outside [0, 1)", self.validation_frac));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad(format!("learning_rate {}", self.learning_rate));
        }
        if let Some(f) = self.propensity_floor {
            if !(f > 0.0 && f <= 1.0) {
                return bad(format!("propensity_floor {f} outside (0, 1]"));
            }
        }
        if self.eval_samples == 0 || self.ndcg_samples == 0 {
            return bad("evaluation sample counts must be at least 1".into());
        }
        Ok(())
    }

    pub fn propensity_floor(&self) -> f64 {
        self.propensity_floor.unwrap_or(1.0 / self.k2 as f64)
    }

    pub fn gradient_settings(&self) -> GradientSettings {
        GradientSettings {
            n_mc: self.n_mc,
            exam: ExaminationModel::default(),
            control_variate: self.control_variate,
        }
    }
}

/// Everything a training run reads besides the initial policies.
#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a> {
    pub log: &'a ClickLog,
    pub rho0: &'a PropensityTable,
    /// Needed only for [`RerankerPretraining::LoggingCandidates`].
    pub logging_candidate: Option<&'a PlPolicy>,
    /// Relevance and users for the optional NDCG column of the history.
    pub eval: Option<(&'a RelevanceMatrix, &'a [UserId])>,
}

/// Which part of a regime an epoch belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Candidate,
    Reranker,
    Joint,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::Candidate => "candidate",
            Phase::Reranker => "reranker",
            Phase::Joint => "joint",
        }
    }
}

/// One row per evaluated epoch; epoch 0 is the state before training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub regime: Regime,
    pub phase: Phase,
    pub epoch: usize,
    pub u_train: f64,
    pub u_validation: Option<f64>,
    pub ndcg10: Option<f64>,
    pub seconds: f64,
}

pub fn write_history_csv(rows: &[HistoryRow], mut w: impl Write) -> Result<()> {
    let io = |e| Error::io("<history>", e);
    writeln!(w, "epoch,regime,phase,u_train,u_validation,ndcg10,seconds").map_err(io)?;
    let opt = |x: Option<f64>| x.map(|v| format!("{v:.6}")).unwrap_or_default();
    for r in rows {
        writeln!(
            w,
            "{},{},{},{:.6},{},{},{:.3}",
            r.epoch,
            r.regime,
            r.phase.name(),
            r.u_train,
            opt(r.u_validation),
            opt(r.ndcg10),
            r.seconds
        )
        .map_err(io)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub pipeline: TwoStage,
    pub history: Vec<HistoryRow>,
    pub candidate_updates: u64,
    pub reranker_updates: u64,
}

/// Split off the trailing `frac` of the log; the held-out part is `None`
/// when it would be empty.
pub fn split_log(log: &ClickLog, frac: f64) -> (ClickLog, Option<ClickLog>) {
    let n_val = (log.len() as f64 * frac).round() as usize;
    if n_val == 0 || n_val >= log.len() {
        return (log.clone(), None);
    }
    let cut = log.len() - n_val;
    (
        ClickLog {
            records: log.records[..cut].to_vec(),
        },
        Some(ClickLog {
            records: log.records[cut..].to_vec(),
        }),
    )
}

/// Two-stage IPS value with a fixed evaluation seed.
pub fn two_stage_value(
    pipeline: &TwoStage,
    log: &ClickLog,
    rho0: &PropensityTable,
    n_samples: usize,
    seed: u64,
) -> Result<f64> {
    let exam = ExaminationModel::default();
    let backend = Backend::MonteCarlo { n_samples, seed };
    Ok(ips_utility(log, &|q| doc_weights(pipeline, q, &exam, backend), rho0)?.value)
}

/// Single-stage IPS value of `policy` showing `k` items from the catalog.
pub fn single_stage_value(
    policy: &PlPolicy,
    k: usize,
    log: &ClickLog,
    rho0: &PropensityTable,
    n_samples: usize,
    seed: u64,
) -> Result<f64> {
    let exam = ExaminationModel::default();
    let weights = |q: UserId| {
        let mut r = rng::stream(seed, &[rng::label("single_stage_weights"), q as u64]);
        doc_weights_single_stage_mc(policy, q, k, n_samples, &exam, &mut r)
    };
    Ok(ips_utility(log, &weights, rho0)?.value)
}

/// What one minibatch update does.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Update {
    stage: Stage,
    objective: Objective,
}

/// How a phase scores a pipeline on a log.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Valuation {
    TwoStage,
    SingleStage(Stage),
}

struct PhasePlan {
    phase: Phase,
    schedule: fn(u64) -> Update,
    valuation: Valuation,
    epochs: usize,
    early_stopping: bool,
}

struct Runner<'a> {
    cfg: &'a TrainConfig,
    data: TrainData<'a>,
    train: ClickLog,
    val: Option<ClickLog>,
    settings: GradientSettings,
    history: Vec<HistoryRow>,
    candidate_updates: u64,
    reranker_updates: u64,
    started: Instant,
}

impl<'a> Runner<'a> {
    fn value(&self, pipeline: &TwoStage, v: Valuation, log: &ClickLog, seed: u64) -> Result<f64> {
        match v {
            Valuation::TwoStage => two_stage_value(pipeline, log, self.data.rho0, self.cfg.eval_samples, seed),
            Valuation::SingleStage(stage) => {
                let policy = match stage {
                    Stage::Candidate => &pipeline.candidate,
                    Stage::Reranker => &pipeline.reranker,
                };
                single_stage_value(policy, pipeline.k, log, self.data.rho0, self.cfg.eval_samples, seed)
            }
        }
    }

    fn record(&mut self, pipeline: &TwoStage, spec: &PhasePlan, epoch: usize) -> Result<Option<f64>> {
        let seed = rng::derive(self.cfg.seed, &[rng::label("evaluation"), rng::label(spec.phase.name())]);
        let u_train = self.value(pipeline, spec.valuation, &self.train, seed)?;
        let u_validation = match &self.val {
            Some(v) => Some(self.value(pipeline, spec.valuation, v, seed)?),
            None => None,
        };
        let ndcg10 = match self.data.eval {
            Some((rel, users)) if self.cfg.ndcg_every > 0 && epoch % self.cfg.ndcg_every == 0 => {
                let backend = Backend::MonteCarlo {
                    n_samples: self.cfg.ndcg_samples,
                    seed: rng::derive(self.cfg.seed, &[rng::label("history_ndcg")]),
                };
                Some(estimator::ndcg_at_10(pipeline, rel, users, backend)?.mean)
            }
            _ => None,
        };
        self.history.push(HistoryRow {
            regime: self.cfg.regime,
            phase: spec.phase,
            epoch,
            u_train,
            u_validation,
            ndcg10,
            seconds: self.started.elapsed().as_secs_f64(),
        });
        Ok(u_validation)
    }

    fn run_phase(&mut self, mut pipeline: TwoStage, spec: PhasePlan) -> Result<TwoStage> {
        let n = self.train.len();
        let bs = self.cfg.batch_size;
        let mut opt_c = OptimizerState::new(&pipeline.candidate.model, self.cfg.learning_rate);
        let mut opt_r = OptimizerState::new(&pipeline.reranker.model, self.cfg.learning_rate);
        let mut best = self.record(&pipeline, &spec, 0)?;
        let mut best_pipeline = pipeline.clone();
        let mut since_best = 0;
        let mut update_idx: u64 = 0;
        let mut order: Vec<usize> = (0..n).collect();
        let phase_label = rng::label(spec.phase.name());
        for epoch in 1..=spec.epochs {
            let mut shuffle = rng::stream(self.cfg.seed, &[phase_label, rng::label("shuffle"), epoch as u64]);
            order.sort_unstable();
            order.shuffle(&mut shuffle);
            let grad_seed = rng::derive(self.cfg.seed, &[phase_label, rng::label("gradient"), epoch as u64]);
            for chunk in order.chunks(bs) {
                let update = (spec.schedule)(update_idx);
                update_idx += 1;
                let batch: Vec<ClickRecord> = chunk.iter().map(|&i| self.train.records[i].clone()).collect();
                let ids: Vec<u64> = chunk.iter().map(|&i| i as u64).collect();
                let grads = match update.objective {
                    Objective::TwoStage(stage) => match stage {
                        Stage::Candidate => grad_candidate_batch(
                            &pipeline,
                            &batch,
                            self.data.rho0,
                            &self.settings,
                            grad_seed,
                            &ids,
                        )?,
                        Stage::Reranker => grad_reranker_batch(
                            &pipeline,
                            &batch,
                            self.data.rho0,
                            &self.settings,
                            grad_seed,
                            &ids,
                        )?,
                    },
                    Objective::SingleStage(stage) => grad_single_stage_batch(
                        &pipeline,
                        stage,
                        &batch,
                        self.data.rho0,
                        &self.settings,
                        grad_seed,
                        &ids,
                    )?,
                };
                match update.stage {
                    Stage::Candidate => {
                        opt_c.step(&mut pipeline.candidate.model, &grads)?;
                        self.candidate_updates += 1;
                    }
                    Stage::Reranker => {
                        opt_r.step(&mut pipeline.reranker.model, &grads)?;
                        self.reranker_updates += 1;
                    }
                }
            }
            let val = self.record(&pipeline, &spec, epoch)?;
            if !spec.early_stopping {
                continue;
            }
            match (val, best) {
                (Some(v), Some(b)) if v > b => {
                    best = Some(v);
                    best_pipeline = pipeline.clone();
                    since_best = 0;
                }
                (Some(_), Some(_)) => {
                    since_best += 1;
                    if since_best >= self.cfg.patience.max(1) {
                        break;
                    }
                }
                _ => best_pipeline = pipeline.clone(),
            }
        }
        Ok(if spec.early_stopping { best_pipeline } else { pipeline })
    }
}

fn candidate_two_stage(_: u64) -> Update {
    Update {
        stage: Stage::Candidate,
        objective: Objective::TwoStage(Stage::Candidate),
    }
}

fn reranker_two_stage(_: u64) -> Update {
    Update {
        stage: Stage::Reranker,
        objective: Objective::TwoStage(Stage::Reranker),
    }
}

fn candidate_single_stage(_: u64) -> Update {
    Update {
        stage: Stage::Candidate,
        objective: Objective::SingleStage(Stage::Candidate),
    }
}

fn reranker_single_stage(_: u64) -> Update {
    Update {
        stage: Stage::Reranker,
        objective: Objective::SingleStage(Stage::Reranker),
    }
}

/// Even-indexed minibatches update the candidate generator, odd ones the re-ranker.
fn alternating(i: u64) -> Update {
    if i % 2 == 0 {
        candidate_two_stage(i)
    } else {
        reranker_two_stage(i)
    }
}

fn runner<'a>(cfg: &'a TrainConfig, data: TrainData<'a>) -> Result<Runner<'a>> {
    cfg.validate()?;
    if data.log.is_empty() {
        return Err(Error::Argument("training needs a nonempty click log".into()));
    }
    let (train, val) = split_log(data.log, cfg.validation_frac);
    Ok(Runner {
        cfg,
        data,
        train,
        val,
        settings: cfg.gradient_settings(),
        history: Vec::new(),
        candidate_updates: 0,
        reranker_updates: 0,
        started: Instant::now(),
    })
}

fn pipeline_from(init: &TwoStage, cfg: &TrainConfig) -> Result<TwoStage> {
    TwoStage::new(init.candidate.clone(), init.reranker.clone(), cfg.k2, cfg.k)
}

/// Single-stage pre-training of a re-ranker for a fixed number of epochs;
/// the whole log is used and nothing is held out.
pub fn pretrain_reranker(
    reranker: &PlPolicy,
    log: &ClickLog,
    rho0: &PropensityTable,
    cfg: &TrainConfig,
) -> Result<(PlPolicy, Vec<HistoryRow>)> {
    let mut cfg = cfg.clone();
    cfg.validation_frac = 0.0;
    cfg.ndcg_every = 0;
    let data = TrainData {
        log,
        rho0,
        logging_candidate: None,
        eval: None,
    };
    let mut run = runner(&cfg, data)?;
    let k2 = reranker.model.n_items();
    let pipeline = TwoStage::new(reranker.clone(), reranker.clone(), k2, cfg.k)?;
    let spec = PhasePlan {
        phase: Phase::Pretrain,
        schedule: reranker_single_stage,
        valuation: Valuation::SingleStage(Stage::Reranker),
        epochs: cfg.pretrain_epochs,
        early_stopping: false,
    };
    let out = run.run_phase(pipeline, spec)?;
    Ok((out.reranker, run.history))
}

/// Train `init` under `cfg.regime`.
pub fn train(init: &TwoStage, data: TrainData<'_>, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let mut run = runner(cfg, data)?;
    let mut pipeline = pipeline_from(init, cfg)?;
    let epochs = cfg.max_epochs;
    let pipeline = match cfg.regime {
        Regime::Baseline => {
            match cfg.reranker_pretraining {
                RerankerPretraining::SingleStage => {
                    let k2 = pipeline.n_items();
                    let single = TwoStage::new(pipeline.reranker.clone(), pipeline.reranker.clone(), k2, cfg.k)?;
                    let spec = PhasePlan {
                        phase: Phase::Pretrain,
                        schedule: reranker_single_stage,
                        valuation: Valuation::SingleStage(Stage::Reranker),
                        epochs: cfg.pretrain_epochs,
                        early_stopping: false,
                    };
                    pipeline.reranker = run.run_phase(single, spec)?.reranker;
                }
                RerankerPretraining::LoggingCandidates => {
                    let logging = data.logging_candidate.ok_or_else(|| {
                        Error::Config("re-ranker pre-training on logging candidates needs the logging policy".into())
                    })?;
                    let behind = TwoStage::new(logging.clone(), pipeline.reranker.clone(), cfg.k2, cfg.k)?;
                    let spec = PhasePlan {
                        phase: Phase::Pretrain,
                        schedule: reranker_two_stage,
                        valuation: Valuation::TwoStage,
                        epochs: cfg.pretrain_epochs,
                        early_stopping: false,
                    };
                    pipeline.reranker = run.run_phase(behind, spec)?.reranker;
                }
            }
            let frozen = pipeline.reranker.model.checksum();
            let spec = PhasePlan {
                phase: Phase::Candidate,
                schedule: candidate_two_stage,
                valuation: Valuation::TwoStage,
                epochs,
                early_stopping: true,
            };
            let out = run.run_phase(pipeline, spec)?;
            if out.reranker.model.checksum() != frozen {
                return Err(Error::Integrity("baseline re-ranker changed after pre-training".into()));
            }
            out
        }
        Regime::Independent => {
            let spec = PhasePlan {
                phase: Phase::Candidate,
                schedule: candidate_single_stage,
                valuation: Valuation::SingleStage(Stage::Candidate),
                epochs,
                early_stopping: true,
            };
            pipeline.candidate = run.run_phase(pipeline.clone(), spec)?.candidate;
            let spec = PhasePlan {
                phase: Phase::Reranker,
                schedule: reranker_single_stage,
                valuation: Valuation::SingleStage(Stage::Reranker),
                epochs,
                early_stopping: true,
            };
            pipeline.reranker = run.run_phase(pipeline.clone(), spec)?.reranker;
            pipeline
        }
        Regime::Joint => {
            let spec = PhasePlan {
                phase: Phase::Joint,
                schedule: alternating,
                valuation: Valuation::TwoStage,
                epochs,
                early_stopping: true,
            };
            run.run_phase(pipeline, spec)?
        }
    };
    Ok(TrainOutcome {
        pipeline,
        history: run.history,
        candidate_updates: run.candidate_updates,
        reranker_updates: run.reranker_updates,
    })
}

/// Supervised settings for fitting the production (logging) model on true
/// relevance of a small user group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoggingFit {
    pub epochs: usize,
    pub batch_size: usize,
    pub n_mc: usize,
    pub learning_rate: f64,
    pub k: usize,
}

impl Default for LoggingFit {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 8,
            n_mc: 100,
            learning_rate: 0.01,
            k: 10,
        }
    }
}

/// REINFORCE on `sum_k exam(k) rel(q, y_k)` over `users`, single stage at
/// temperature 1, for a fixed epoch budget.
pub fn pretrain_logging_model(
    model: &FactorModel,
    rel: &RelevanceMatrix,
    users: &[UserId],
    fit: &LoggingFit,
    seed: u64,
) -> Result<FactorModel> {
    if users.is_empty() || fit.epochs == 0 {
        return Ok(model.clone());
    }
    if fit.batch_size == 0 || fit.n_mc == 0 || fit.k == 0 {
        return Err(Error::Config("logging fit needs positive batch size, samples and K".into()));
    }
    let mut policy = PlPolicy::new(model.clone(), 1.0)?;
    let mut opt = OptimizerState::new(model, fit.learning_rate);
    let settings = GradientSettings {
        n_mc: fit.n_mc,
        exam: ExaminationModel::default(),
        control_variate: false,
    };
    let mut order = users.to_vec();
    for epoch in 0..fit.epochs {
        let mut r = rng::stream(seed, &[rng::label("logging_shuffle"), epoch as u64]);
        order.shuffle(&mut r);
        for (b, chunk) in order.chunks(fit.batch_size).enumerate() {
            let s = rng::derive(seed, &[rng::label("logging_gradient"), epoch as u64, b as u64]);
            let g = supervised_grad(&policy, rel, chunk, fit.k, &settings, s)?;
            opt.step(&mut policy.model, &g)?;
        }
    }
    Ok(policy.model)
}
