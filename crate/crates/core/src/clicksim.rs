//! Position-biased click simulation and logging-propensity estimation.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{IdMap, RelevanceMatrix};
use crate::error::{Error, Result};
use crate::policy::{PipelineDraw, QuerySampler, Ranking, TwoStage, ENUMERATION_LIMIT};
use crate::{rng, ItemId, UserId};

/// The production pipeline that generated the click log.
pub type TwoStageLoggingPolicy = TwoStage;

/// Rank-based examination: `1/k` for `k <= cutoff`, 0 below the cutoff.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExaminationModel {
    pub cutoff: usize,
}

impl Default for ExaminationModel {
    fn default() -> Self {
        Self { cutoff: 10 }
    }
}

impl ExaminationModel {
    pub fn new(cutoff: usize) -> Self {
        Self { cutoff }
    }

    /// Examination probability at 1-based rank `k`.
    pub fn prob(&self, k: usize) -> f64 {
        if k >= 1 && k <= self.cutoff {
            1.0 / k as f64
        } else {
            0.0
        }
    }

    /// Examination probability of an item that may be absent from the list.
    pub fn prob_opt(&self, k: Option<usize>) -> f64 {
        k.map_or(0.0, |k| self.prob(k))
    }

    /// Total examination mass of the first `k` slots.
    pub fn slot_mass(&self, k: usize) -> f64 {
        (1..=k).map(|j| self.prob(j)).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClickRecord {
    pub query: UserId,
    pub displayed: Ranking,
    pub clicks: Vec<bool>,
}

impl ClickRecord {
    pub fn new(query: UserId, displayed: Ranking, clicks: Vec<bool>) -> Result<Self> {
        if clicks.len() != displayed.len() {
            return Err(Error::Argument(format!(
                "{} click bits for {} displayed items",
                clicks.len(),
                displayed.len()
            )));
        }
        Ok(Self {
            query,
            displayed,
            clicks,
        })
    }

    /// Clicked items with their 1-based display rank.
    pub fn clicked(&self) -> impl Iterator<Item = (ItemId, usize)> + '_ {
        self.displayed
            .items()
            .iter()
            .zip(&self.clicks)
            .enumerate()
            .filter(|(_, (_, &c))| c)
            .map(|(j, (&d, _))| (d, j + 1))
    }

    pub fn n_clicks(&self) -> usize {
        self.clicks.iter().filter(|&&c| c).count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ClickLog {
    pub records: Vec<ClickRecord>,
}

#[derive(Serialize, Deserialize)]
struct JsonRecord {
    q: u64,
    y: Vec<u64>,
    c: Vec<u8>,
}

impl ClickLog {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn n_clicks(&self) -> usize {
        self.records.iter().map(ClickRecord::n_clicks).sum()
    }

    /// First `n` records.
    pub fn prefix(&self, n: usize) -> ClickLog {
        ClickLog {
            records: self.records[..n.min(self.len())].to_vec(),
        }
    }

    /// JSON-lines, one `{"q", "y", "c"}` object per record, original ids.
    pub fn write_jsonl(&self, ids: &IdMap, mut w: impl Write) -> Result<()> {
        for r in &self.records {
            let rec = JsonRecord {
                q: ids.user_id(r.query),
                y: r.displayed.items().iter().map(|&d| ids.item_id(d)).collect(),
                c: r.clicks.iter().map(|&c| u8::from(c)).collect(),
            };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")
                .map_err(|e| Error::io("<click log>", e))?;
        }
        Ok(())
    }

    pub fn save_jsonl(&self, ids: &IdMap, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        self.write_jsonl(ids, &mut w)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_jsonl(ids: &IdMap, r: impl std::io::Read) -> Result<Self> {
        let (ui, ii) = (ids.user_index(), ids.item_index());
        let mut records = Vec::new();
        for (n, line) in BufReader::new(r).lines().enumerate() {
            let line = line.map_err(|e| Error::Parse {
                line: n + 1,
                message: e.to_string(),
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: JsonRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: n + 1,
                message: e.to_string(),
            })?;
            let unknown = |what: &str, id: u64| Error::Data(format!("line {}: unknown {what} {id}", n + 1));
            let q = *ui.get(&rec.q).ok_or_else(|| unknown("user", rec.q))?;
            let y = rec
                .y
                .iter()
                .map(|d| ii.get(d).copied().ok_or_else(|| unknown("item", *d)))
                .collect::<Result<Vec<_>>>()?;
            let c = rec.c.iter().map(|&b| b != 0).collect();
            records.push(ClickRecord::new(q, Ranking::new(y)?, c)?);
        }
        Ok(Self { records })
    }

    pub fn load_jsonl(ids: &IdMap, path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_jsonl(ids, f)
    }
}

/// Simulate `n` records. Record `i` draws from its own stream derived from
/// `(seed, i)`, so the first `m` records do not depend on `n` and the log
/// does not depend on thread scheduling.
pub fn simulate_log(
    logging: &TwoStageLoggingPolicy,
    rel: &RelevanceMatrix,
    users: &[UserId],
    n: usize,
    exam: &ExaminationModel,
    seed: u64,
) -> Result<ClickLog> {
    if users.is_empty() {
        return Err(Error::Argument("click simulation needs at least one user".into()));
    }
    if n == 0 {
        return Err(Error::Argument("click simulation needs N >= 1".into()));
    }
    let samplers: HashMap<UserId, QuerySampler> = users
        .par_iter()
        .map(|&u| logging.query_sampler(u).map(|s| (u, s)))
        .collect::<Result<_>>()?;
    let records = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng::stream(seed, &[rng::label("click_record"), i as u64]);
            let q = users[rng.random_range(0..users.len())];
            let mut sampler = samplers[&q].clone();
            let mut draw = PipelineDraw::default();
            sampler.draw(&mut rng, &mut draw);
            let displayed: Vec<ItemId> = draw.displayed().collect();
            let clicks = displayed
                .iter()
                .enumerate()
                .map(|(j, &d)| {
                    let p = exam.prob(j + 1) * rel.rel(q, d);
                    p > 0.0 && rng.random::<f64>() < p
                })
                .collect();
            ClickRecord {
                query: q,
                displayed: Ranking::from_distinct(displayed),
                clicks,
            }
        })
        .collect();
    Ok(ClickLog { records })
}

/// Logging exposure per `(query, item)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PropensityTable {
    rho0: HashMap<(UserId, ItemId), f64>,
    impressions: HashMap<UserId, usize>,
    floor: f64,
}

impl PropensityTable {
    pub fn new(floor: f64) -> Result<Self> {
        if !(floor > 0.0 && floor <= 1.0) {
            return Err(Error::Argument(format!("propensity floor {floor} must lie in (0, 1]")));
        }
        Ok(Self {
            rho0: HashMap::new(),
            impressions: HashMap::new(),
            floor,
        })
    }

    pub fn floor(&self) -> f64 {
        self.floor
    }

    /// Store a propensity, clipped into `[floor, 1]`.
    pub fn insert(&mut self, q: UserId, d: ItemId, value: f64) {
        self.rho0.insert((q, d), value.clamp(self.floor, 1.0));
    }

    pub fn get(&self, q: UserId, d: ItemId) -> Option<f64> {
        self.rho0.get(&(q, d)).copied()
    }

    /// Stored value, or the floor for pairs never displayed.
    pub fn lookup(&self, q: UserId, d: ItemId) -> f64 {
        self.get(q, d).unwrap_or(self.floor)
    }

    /// Stored value or a data-integrity error.
    pub fn require(&self, q: UserId, d: ItemId) -> Result<f64> {
        self.get(q, d).ok_or_else(|| {
            Error::Integrity(format!("no logging propensity for clicked pair (q={q}, d={d})"))
        })
    }

    pub fn impressions(&self, q: UserId) -> usize {
        self.impressions.get(&q).copied().unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.rho0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rho0.is_empty()
    }

    /// Multiply every stored value (not the floor) by `a`, then re-clip.
    pub fn scaled(&self, a: f64) -> Self {
        let mut out = self.clone();
        for v in out.rho0.values_mut() {
            *v = (*v * a).clamp(0.0, 1.0).max(f64::MIN_POSITIVE);
        }
        out
    }

    /// JSON object keyed `"q:d"` with original ids.
    pub fn to_json(&self, ids: &IdMap) -> Result<String> {
        let map: BTreeMap<String, f64> = self
            .rho0
            .iter()
            .map(|(&(q, d), &v)| (format!("{}:{}", ids.user_id(q), ids.item_id(d)), v))
            .collect();
        Ok(serde_json::to_string(&map)?)
    }

    pub fn from_json(ids: &IdMap, text: &str, floor: f64) -> Result<Self> {
        let map: BTreeMap<String, f64> = serde_json::from_str(text)?;
        let (ui, ii) = (ids.user_index(), ids.item_index());
        let mut t = Self::new(floor)?;
        for (key, v) in map {
            let (q, d) = key
                .split_once(':')
                .and_then(|(q, d)| Some((q.parse::<u64>().ok()?, d.parse::<u64>().ok()?)))
                .ok_or_else(|| Error::Data(format!("bad propensity key {key:?}")))?;
            let q = *ui.get(&q).ok_or_else(|| Error::Data(format!("unknown user {q}")))?;
            let d = *ii.get(&d).ok_or_else(|| Error::Data(format!("unknown item {d}")))?;
            t.rho0.insert((q, d), v);
        }
        Ok(t)
    }
}

/// Frequency estimate: mean examination probability of each displayed item
/// over its query's records, clipped below at `floor`.
pub fn estimate_propensities(
    log: &ClickLog,
    exam: &ExaminationModel,
    floor: f64,
) -> Result<PropensityTable> {
    if log.is_empty() {
        return Err(Error::Argument("cannot estimate propensities from an empty log".into()));
    }
    let mut table = PropensityTable::new(floor)?;
    let mut mass: HashMap<(UserId, ItemId), f64> = HashMap::new();
    for r in &log.records {
        *table.impressions.entry(r.query).or_insert(0) += 1;
        for (j, &d) in r.displayed.items().iter().enumerate() {
            *mass.entry((r.query, d)).or_insert(0.0) += exam.prob(j + 1);
        }
    }
    for ((q, d), m) in mass {
        let n = table.impressions[&q] as f64;
        table.insert(q, d, m / n);
    }
    Ok(table)
}

/// Exact `E[exam(k(d))]` per item under the logging pipeline, by
/// enumerating every `(y_c, y_r)`.
pub fn exact_propensities(
    logging: &TwoStageLoggingPolicy,
    query: UserId,
    exam: &ExaminationModel,
) -> Result<BTreeMap<ItemId, f64>> {
    let n = logging.n_items();
    if n > ENUMERATION_LIMIT {
        return Err(Error::TooLarge {
            size: n,
            limit: ENUMERATION_LIMIT,
        });
    }
    let catalog: Vec<ItemId> = (0..n).collect();
    let mut out: BTreeMap<ItemId, f64> = catalog.iter().map(|&d| (d, 0.0)).collect();
    for (yc, pc) in logging.candidate.enumerate_rankings(query, &catalog, logging.k2)? {
        for (yr, pr) in logging.reranker.enumerate_rankings(query, yc.items(), logging.k)? {
            for (j, &d) in yr.items().iter().enumerate() {
                *out.get_mut(&d).expect("catalog item") += pc * pr * exam.prob(j + 1);
            }
        }
    }
    Ok(out)
}
