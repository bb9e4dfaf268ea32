//! End-to-end study runner: build a world, simulate logs, train every
//! regime and score it on held-out users, over a grid of
//! `(regime, K2, N, run)` cells.
//!
//! Randomness is shared where it can be: every regime and log size of the
//! same run sees the same user split, the same logging policy and (for a
//! given `K2`) the same click log, of which each `N` uses a prefix. Only the
//! training streams are keyed by the full cell coordinates.

mod grid;

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::clicksim::{estimate_propensities, simulate_log, ClickLog, ExaminationModel};
use crate::dataset::{
    binarize, load_ratings, split_users, svd_init, svd_init_ratings, synth, FactorModel,
    RatingsTable, RelevanceMatrix, UserSplit, DEFAULT_DIM,
};
use crate::error::{Error, Result};
use crate::estimator::{ndcg_at_10, Backend};
use crate::policy::{PlPolicy, TwoStage};
use crate::trainer::{self, LoggingFit, Regime, TrainConfig, TrainData, TrainOutcome};
use crate::{rng, UserId};

pub use grid::{format_cell, read_grid_csv, render_table, write_grid_csv, CellStats, ResultsGrid};

/// Which matrix the initial embeddings factorize.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SvdSource {
    /// The binarized relevance matrix.
    Binary,
    /// The raw 1-5 ratings.
    Ratings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// A `::`-separated ratings file; a synthetic world is generated when unset.
    pub dataset: Option<PathBuf>,
    pub synthetic: synth::SyntheticConfig,
    pub max_users: Option<usize>,
    pub max_items: Option<usize>,
    pub k2_list: Vec<usize>,
    pub n_list: Vec<usize>,
    pub regimes: Vec<Regime>,
    pub n_runs: usize,
    pub master_seed: u64,
    pub eval_frac: f64,
    pub logging_frac: f64,
    pub dim: usize,
    pub svd_source: SvdSource,
    /// Temperature of both stages of the logging pipeline.
    pub logging_temperature: f64,
    pub logging_fit: LoggingFit,
    /// Pipeline draws per evaluation user for NDCG@10.
    pub ndcg_samples: usize,
    /// Per-cell training settings; `regime`, `k2` and `seed` are set per cell.
    pub train: TrainConfig,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ExperimentConfig {
    /// Laptop-sized grid on a ~1,400 x 1,000 world.
    pub fn desk() -> Self {
        Self {
            dataset: None,
            synthetic: synth::SyntheticConfig::default(),
            max_users: Some(1400),
            max_items: Some(1000),
            k2_list: vec![100, 200],
            n_list: vec![25_000, 50_000, 100_000],
            regimes: Regime::ALL.to_vec(),
            n_runs: 5,
            master_seed: 2024,
            eval_frac: 0.1,
            logging_frac: 0.03,
            dim: DEFAULT_DIM,
            svd_source: SvdSource::Binary,
            logging_temperature: 1.0,
            logging_fit: LoggingFit::default(),
            ndcg_samples: 50,
            train: TrainConfig::default(),
            output_dir: PathBuf::from("results"),
        }
    }

    /// The full-size grid: whole catalog, large candidate sets and logs, 25 runs.
    pub fn full() -> Self {
        Self {
            synthetic: synth::SyntheticConfig {
                n_users: 6040,
                n_items: 3706,
                ..synth::SyntheticConfig::default()
            },
            max_users: None,
            max_items: None,
            k2_list: vec![500, 1000, 1500],
            n_list: vec![100_000, 320_000, 1_000_000],
            n_runs: 25,
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "full" => Ok(Self::full()),
            other => Err(Error::Config(format!("unknown preset `{other}` (desk|full)"))),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Overlay the keys present in a JSON object onto this configuration;
    /// nested objects merge key by key.
    pub fn overlay_json(&self, text: &str) -> Result<Self> {
        fn merge(base: &mut serde_json::Value, top: serde_json::Value) {
            match (base, top) {
                (serde_json::Value::Object(b), serde_json::Value::Object(t)) => {
                    for (k, v) in t {
                        match b.get_mut(&k) {
                            Some(slot) => merge(slot, v),
                            None => {
                                b.insert(k, v);
                            }
                        }
                    }
                }
                (slot, v) => *slot = v,
            }
        }
        let mut value = serde_json::to_value(self)?;
        merge(&mut value, serde_json::from_str(text)?);
        let cfg: Self = serde_json::from_value(value)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Apply `key=value` overrides; nested fields use dots (`train.n_mc=50`).
    /// Values are parsed as JSON, falling back to a plain string.
    pub fn apply_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut value = serde_json::to_value(self)?;
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            let parsed = serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
            let mut slot = &mut value;
            for part in key.split('.') {
                slot = slot
                    .as_object_mut()
                    .and_then(|m| m.get_mut(part))
                    .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
            }
            *slot = parsed;
        }
        let cfg: Self = serde_json::from_value(value)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_runs == 0 {
            return bad("n_runs must be at least 1".into());
        }
        if self.k2_list.is_empty() || self.n_list.is_empty() || self.regimes.is_empty() {
            return bad("K2, N and regime lists must be nonempty".into());
        }
        let min_k2 = *self.k2_list.iter().min().expect("nonempty");
        if self.train.k == 0 || self.train.k > min_k2 {
            return bad(format!("K ({}) must be in 1..=min K2 ({min_k2})", self.train.k));
        }
        if self.n_list.contains(&0) {
            return bad("every N must be positive".into());
        }
        if !(self.logging_temperature > 0.0 && self.logging_temperature.is_finite()) {
            return bad(format!("logging_temperature {}", self.logging_temperature));
        }
        if self.ndcg_samples == 0 || self.dim == 0 {
            return bad("ndcg_samples and dim must be positive".into());
        }
        TrainConfig {
            k2: min_k2,
            ..self.train.clone()
        }
        .validate()
    }

    /// Settings that decide a cell's value; list fields and the output
    /// location are blanked so that growing the grid keeps old cells valid.
    fn cell_context(&self) -> Self {
        Self {
            k2_list: Vec::new(),
            n_list: Vec::new(),
            regimes: Vec::new(),
            n_runs: 0,
            output_dir: PathBuf::new(),
            ..self.clone()
        }
    }

    pub fn fingerprint(&self) -> u64 {
        let text = serde_json::to_string(&self.cell_context()).expect("config serializes");
        rng::label(&text)
    }

    /// Every cell of the grid, in output order.
    pub fn cells(&self) -> Vec<CellKey> {
        let mut out = Vec::new();
        for &regime in &self.regimes {
            for &k2 in &self.k2_list {
                for &n in &self.n_list {
                    out.push(CellKey { regime, k2, n });
                }
            }
        }
        out
    }
}

/// One column entry of the results table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellKey {
    pub regime: Regime,
    pub k2: usize,
    pub n: usize,
}

impl CellKey {
    /// Parse `regime,K2,N`.
    pub fn parse(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        if parts.len() != 3 {
            return Err(Error::Argument(format!("cell `{s}` is not regime,K2,N")));
        }
        let num = |x: &str| {
            x.replace('_', "")
                .parse::<f64>()
                .ok()
                .filter(|v| *v >= 1.0 && v.fract() == 0.0)
                .map(|v| v as usize)
                .ok_or_else(|| Error::Argument(format!("`{x}` is not a positive count")))
        };
        Ok(Self {
            regime: parts[0].parse()?,
            k2: num(parts[1])?,
            n: num(parts[2])?,
        })
    }

    fn hash(&self, run: usize, fingerprint: u64) -> u64 {
        rng::derive(
            fingerprint,
            &[rng::label(self.regime.name()), self.k2 as u64, self.n as u64, run as u64],
        )
    }
}

impl std::fmt::Display for CellKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{},K2={},N={}", self.regime, self.k2, self.n)
    }
}

/// Shared state of one run: data, split and initial embeddings.
#[derive(Debug)]
pub struct World {
    pub ratings: RatingsTable,
    pub rel: RelevanceMatrix,
    pub split: UserSplit,
    pub init: FactorModel,
    pub logging_model: FactorModel,
}

/// The logging pipeline for one `(run, K2)` and its longest click log.
#[derive(Debug)]
pub struct LoggedData {
    pub logging: TwoStage,
    pub log: ClickLog,
}

/// Result of one `(cell, run)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRun {
    pub cell: CellKey,
    pub run: usize,
    pub ndcg10: f64,
    pub fingerprint: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellFailure {
    pub cell: CellKey,
    pub run: usize,
    pub message: String,
}

/// Runs cells of one configuration, caching worlds and click logs.
pub struct Experiment {
    cfg: ExperimentConfig,
    fingerprint: u64,
    base: Option<Arc<RatingsTable>>,
    worlds: HashMap<usize, Arc<World>>,
    logs: HashMap<(usize, usize), Arc<LoggedData>>,
    /// Keep per-cell training histories.
    pub keep_history: bool,
    pub histories: Vec<(CellKey, usize, TrainOutcome)>,
}

impl Experiment {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            fingerprint: cfg.fingerprint(),
            cfg,
            base: None,
            worlds: HashMap::new(),
            logs: HashMap::new(),
            keep_history: false,
            histories: Vec::new(),
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    fn base_ratings(&mut self) -> Result<Arc<RatingsTable>> {
        if let Some(b) = &self.base {
            return Ok(b.clone());
        }
        let full = match &self.cfg.dataset {
            Some(p) => load_ratings(p)?,
            None => synth::generate(&self.cfg.synthetic)?,
        };
        let table = match (self.cfg.max_users, self.cfg.max_items) {
            (None, None) => full,
            (u, i) => full.subsample(
                u.unwrap_or(usize::MAX),
                i.unwrap_or(usize::MAX),
                rng::derive(self.cfg.master_seed, &[rng::label("subsample")]),
            )?,
        };
        let b = Arc::new(table);
        self.base = Some(b.clone());
        Ok(b)
    }

    pub fn world(&mut self, run: usize) -> Result<Arc<World>> {
        if let Some(w) = self.worlds.get(&run) {
            return Ok(w.clone());
        }
        let ratings = (*self.base_ratings()?).clone();
        let cfg = &self.cfg;
        let rel = binarize(&ratings);
        let seed = |name: &str| rng::derive(cfg.master_seed, &[rng::label(name), run as u64]);
        let split = split_users(&rel, cfg.eval_frac, cfg.logging_frac, seed("split"))?;
        let init = match cfg.svd_source {
            SvdSource::Binary => svd_init(&rel, cfg.dim, seed("svd"))?,
            SvdSource::Ratings => svd_init_ratings(&ratings, cfg.dim, seed("svd"))?,
        };
        let logging_model = trainer::pretrain_logging_model(
            &init,
            &rel,
            &split.logging_users,
            &cfg.logging_fit,
            seed("logging_fit"),
        )?;
        let w = Arc::new(World {
            ratings,
            rel,
            split,
            init,
            logging_model,
        });
        self.worlds.insert(run, w.clone());
        Ok(w)
    }

    pub fn logged(&mut self, run: usize, k2: usize) -> Result<Arc<LoggedData>> {
        if let Some(l) = self.logs.get(&(run, k2)) {
            return Ok(l.clone());
        }
        let world = self.world(run)?;
        let cfg = &self.cfg;
        let policy = PlPolicy::new(world.logging_model.clone(), cfg.logging_temperature)?;
        let logging = TwoStage::new(policy.clone(), policy, k2, cfg.train.k)?;
        let n_max = *cfg.n_list.iter().max().expect("validated");
        let seed = rng::derive(cfg.master_seed, &[rng::label("clicks"), run as u64, k2 as u64]);
        let log = simulate_log(
            &logging,
            &world.rel,
            &world.split.interaction_users,
            n_max,
            &ExaminationModel::default(),
            seed,
        )?;
        let l = Arc::new(LoggedData { logging, log });
        self.logs.insert((run, k2), l.clone());
        Ok(l)
    }

    /// NDCG@10 of `pipeline` on the run's evaluation users.
    pub fn evaluate(&self, world: &World, pipeline: &TwoStage, run: usize) -> Result<f64> {
        let backend = Backend::MonteCarlo {
            n_samples: self.cfg.ndcg_samples,
            seed: rng::derive(self.cfg.master_seed, &[rng::label("ndcg"), run as u64]),
        };
        Ok(ndcg_at_10(pipeline, &world.rel, &world.split.eval_users, backend)?.mean)
    }

    pub fn train_config(&self, cell: CellKey, run: usize) -> TrainConfig {
        TrainConfig {
            regime: cell.regime,
            k2: cell.k2,
            seed: rng::derive(
                self.cfg.master_seed,
                &[
                    rng::label("train"),
                    rng::label(cell.regime.name()),
                    cell.k2 as u64,
                    cell.n as u64,
                    run as u64,
                ],
            ),
            ..self.cfg.train.clone()
        }
    }

    /// Train and score one cell for one run.
    pub fn run_cell(&mut self, cell: CellKey, run: usize) -> Result<f64> {
        let annotate = |e: Error| Error::Cell {
            cell: format!("{cell},run={run}"),
            source: Box::new(e),
        };
        self.run_cell_inner(cell, run).map_err(annotate)
    }

    fn run_cell_inner(&mut self, cell: CellKey, run: usize) -> Result<f64> {
        let world = self.world(run)?;
        let logged = self.logged(run, cell.k2)?;
        let log = logged.log.prefix(cell.n);
        let tcfg = self.train_config(cell, run);
        let rho0 = estimate_propensities(&log, &ExaminationModel::default(), tcfg.propensity_floor())?;
        let init_policy = PlPolicy::new(world.init.clone(), 1.0)?;
        let init = TwoStage::new(init_policy.clone(), init_policy, cell.k2, tcfg.k)?;
        let eval_users: &[UserId] = &world.split.eval_users;
        let data = TrainData {
            log: &log,
            rho0: &rho0,
            logging_candidate: Some(&logged.logging.candidate),
            eval: Some((&world.rel, eval_users)),
        };
        let outcome = trainer::train(&init, data, &tcfg)?;
        let value = self.evaluate(&world, &outcome.pipeline, run)?;
        if self.keep_history {
            self.histories.push((cell, run, outcome));
        }
        Ok(value)
    }

    fn checkpoint_path(&self, cell: CellKey, run: usize) -> PathBuf {
        self.cfg
            .output_dir
            .join("cells")
            .join(format!("{:016x}.json", cell.hash(run, self.fingerprint)))
    }

    /// The saved result of `(cell, run)` under this configuration, if any.
    pub fn checkpoint(&self, cell: CellKey, run: usize) -> Option<CellRun> {
        let text = fs::read_to_string(self.checkpoint_path(cell, run)).ok()?;
        let saved: CellRun = serde_json::from_str(&text).ok()?;
        (saved.cell == cell && saved.run == run && saved.fingerprint == self.fingerprint).then_some(saved)
    }

    fn save_checkpoint(&self, entry: &CellRun) -> Result<()> {
        let path = self.checkpoint_path(entry.cell, entry.run);
        let dir = path.parent().expect("cells dir");
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, serde_json::to_string(entry)?).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
    }

    /// Run the given cells for every run index, reusing checkpoints in
    /// `output_dir/cells` when `resume` is set. Failed cells are collected,
    /// the rest of the grid still runs.
    pub fn run_cells(
        &mut self,
        cells: &[CellKey],
        resume: bool,
        mut progress: impl FnMut(&CellRun),
    ) -> Result<(ResultsGrid, Vec<CellFailure>)> {
        let mut grid = ResultsGrid::default();
        let mut failures = Vec::new();
        for run in 0..self.cfg.n_runs {
            for &cell in cells {
                if resume {
                    if let Some(saved) = self.checkpoint(cell, run) {
                        grid.insert(cell, run, saved.ndcg10);
                        progress(&saved);
                        continue;
                    }
                }
                match self.run_cell(cell, run) {
                    Ok(ndcg10) => {
                        let entry = CellRun {
                            cell,
                            run,
                            ndcg10,
                            fingerprint: self.fingerprint,
                        };
                        if resume {
                            self.save_checkpoint(&entry)?;
                        }
                        grid.insert(cell, run, ndcg10);
                        progress(&entry);
                    }
                    Err(e) => failures.push(CellFailure {
                        cell,
                        run,
                        message: e.to_string(),
                    }),
                }
            }
            // worlds of finished runs are not needed again
            self.worlds.remove(&run);
            self.logs.retain(|(r, _), _| *r != run);
        }
        Ok((grid, failures))
    }

    pub fn run_grid(&mut self, resume: bool) -> Result<(ResultsGrid, Vec<CellFailure>)> {
        let cells = self.cfg.cells();
        self.run_cells(&cells, resume, |_| {})
    }
}

/// One cell, one run, from scratch.
pub fn run_cell(cfg: &ExperimentConfig, cell: CellKey, run: usize) -> Result<f64> {
    Experiment::new(cfg.clone())?.run_cell(cell, run)
}

/// Write `grid.csv` and `table.txt` into `dir`.
pub fn write_outputs(grid: &ResultsGrid, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut csv = Vec::new();
    write_grid_csv(grid, &mut csv)?;
    let p = dir.join("grid.csv");
    fs::write(&p, csv).map_err(|e| Error::io(&p, e))?;
    let p = dir.join("table.txt");
    fs::write(&p, render_table(grid).0).map_err(|e| Error::io(&p, e))?;
    Ok(())
}
