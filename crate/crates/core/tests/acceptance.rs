//! Acceptance criteria 1-8, one PASS/FAIL line each.
//!
//! Exact quantities are recomputed here by brute force (Plackett-Luce
//! products over every ordered prefix) instead of through the library's own
//! enumeration code. Criteria 5 and 6 train the desk grid; finished cell
//! runs are checkpointed under `target/tmp/acceptance-desk` (or
//! `$TWOSTAGE_ACCEPTANCE_DIR`) and reused when the configuration matches.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use twostage_cltr::clicksim::{exact_propensities, ClickLog, ClickRecord, ExaminationModel, PropensityTable};
use twostage_cltr::dataset::{FactorModel, RelevanceMatrix};
use twostage_cltr::estimator::{doc_weights_exact, doc_weights_mc, ips_utility, slot_mass, true_utility, Backend};
use twostage_cltr::experiment::{self, CellKey, Experiment, ExperimentConfig, ResultsGrid};
use twostage_cltr::policy::{pl, PlPolicy, PlSampler, Ranking, TwoStage};
use twostage_cltr::reduce::mean_and_se;
use twostage_cltr::trainer::{exact, two_stage_score_grad, write_history_csv, GradientSettings, Regime, Stage};

const SEED: u64 = 2024;

struct Outcome {
    passed: bool,
    detail: String,
}

fn report(id: usize, name: &str, started: Instant, outcome: &Outcome) {
    let tag = if outcome.passed { "PASS" } else { "FAIL" };
    let line = format!(
        "[{tag}] criterion {id} ({name}): {} [{:.1}s]\n",
        outcome.detail,
        started.elapsed().as_secs_f64()
    );
    // written directly so the line shows even when output is captured
    let mut out = std::io::stdout();
    out.write_all(line.as_bytes()).unwrap();
    out.flush().unwrap();
}

// ---------------------------------------------------------------------------
// brute-force oracle

fn pl_prob(scores: &[f64], order: &[usize]) -> f64 {
    let mut remaining: Vec<usize> = (0..scores.len()).collect();
    let mut p = 1.0;
    for &i in order {
        let z: f64 = remaining.iter().map(|&j| scores[j].exp()).sum();
        p *= scores[i].exp() / z;
        remaining.retain(|&j| j != i);
    }
    p
}

fn ordered_prefixes(items: &[usize], l: usize) -> Vec<Vec<usize>> {
    if l == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for (pos, &first) in items.iter().enumerate() {
        let mut rest = items.to_vec();
        rest.remove(pos);
        for mut tail in ordered_prefixes(&rest, l - 1) {
            tail.insert(0, first);
            out.push(tail);
        }
    }
    out
}

/// Every displayed list `y_r` of the pipeline with its probability
/// (summed over the candidate lists that lead to it).
fn displayed_lists(cand: &[f64], rer: &[f64], k2: usize, k: usize) -> Vec<(Vec<usize>, f64)> {
    let n = cand.len();
    let catalog: Vec<usize> = (0..n).collect();
    let mut out: BTreeMap<Vec<usize>, f64> = BTreeMap::new();
    for yc in ordered_prefixes(&catalog, k2) {
        let pc = pl_prob(cand, &yc);
        let sub: Vec<f64> = yc.iter().map(|&d| rer[d]).collect();
        let local: Vec<usize> = (0..k2).collect();
        for yr in ordered_prefixes(&local, k) {
            let pr = pl_prob(&sub, &yr);
            *out.entry(yr.iter().map(|&p| yc[p]).collect()).or_default() += pc * pr;
        }
    }
    out.into_iter().collect()
}

fn exam(rank: usize) -> f64 {
    if rank <= 10 {
        1.0 / rank as f64
    } else {
        0.0
    }
}

/// `rho(d) = E[exam(rank of d)]` for every item.
fn doc_weights_oracle(cand: &[f64], rer: &[f64], k2: usize, k: usize) -> Vec<f64> {
    let mut w = vec![0.0; cand.len()];
    for (yr, p) in displayed_lists(cand, rer, k2, k) {
        for (j, &d) in yr.iter().enumerate() {
            w[d] += p * exam(j + 1);
        }
    }
    w
}

fn normals(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn direct(scores: &[f64]) -> PlPolicy {
    PlPolicy::new(FactorModel::with_direct_scores(&[scores.to_vec()]), 1.0).unwrap()
}

fn pipeline(cand: &[f64], rer: &[f64], k2: usize, k: usize) -> TwoStage {
    TwoStage::new(direct(cand), direct(rer), k2, k).unwrap()
}

// ---------------------------------------------------------------------------
// 1

fn unbiasedness() -> Outcome {
    let em = ExaminationModel::default();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut worst: f64 = 0.0;
    let mut worst_lib_u: f64 = 0.0;
    for _ in 0..50 {
        let n = rng.random_range(2..=5usize);
        let k2 = rng.random_range(1..=n.min(4));
        let k = rng.random_range(1..=k2.min(2));
        let (lc, lr, tc, tr) = (normals(n, &mut rng), normals(n, &mut rng), normals(n, &mut rng), normals(n, &mut rng));
        let rel: Vec<u8> = (0..n).map(|_| rng.random_range(0..2u8)).collect();

        let rho0_oracle = doc_weights_oracle(&lc, &lr, k2, k);
        let rho_oracle = doc_weights_oracle(&tc, &tr, k2, k);
        let u: f64 = (0..n).map(|d| rho_oracle[d] * rel[d] as f64).sum();

        let logging = pipeline(&lc, &lr, k2, k);
        let target = pipeline(&tc, &tr, k2, k);
        let relm = RelevanceMatrix::from_dense(&[rel.clone()]);
        let u_lib = true_utility(&target, &relm, &[0], &em, Backend::Exact).unwrap().value;
        worst_lib_u = worst_lib_u.max((u_lib - u).abs());

        let mut rho0 = PropensityTable::new(1e-12).unwrap();
        for (d, p) in exact_propensities(&logging, 0, &em).unwrap() {
            assert!((p - rho0_oracle[d]).abs() < 1e-12, "logging propensity of {d}");
            rho0.insert(0, d, p);
        }
        let weights = doc_weights_exact(&target, 0, &em).unwrap();
        let weights_fn = |_q| Ok(weights.clone());

        // E[U_hat]: every displayed list, every click pattern
        let mut expected = 0.0;
        for (yr, p) in displayed_lists(&lc, &lr, k2, k) {
            for mask in 0u32..(1 << yr.len()) {
                let mut pm = p;
                let mut clicks = Vec::new();
                for (j, &d) in yr.iter().enumerate() {
                    let c = exam(j + 1) * rel[d] as f64;
                    let clicked = mask >> j & 1 == 1;
                    pm *= if clicked { c } else { 1.0 - c };
                    clicks.push(clicked);
                }
                if pm == 0.0 || !clicks.contains(&true) {
                    continue;
                }
                let record = ClickRecord::new(0, Ranking::new(yr.clone()).unwrap(), clicks).unwrap();
                let log = ClickLog { records: vec![record] };
                expected += pm * ips_utility(&log, &weights_fn, &rho0).unwrap().value;
            }
        }
        worst = worst.max((expected - u).abs());
    }
    Outcome {
        passed: worst < 1e-10 && worst_lib_u < 1e-10,
        detail: format!("50 worlds, max |E[U_hat] - U| = {worst:.2e}, max |U_lib - U| = {worst_lib_u:.2e} (tol 1e-10)"),
    }
}

// ---------------------------------------------------------------------------
// 2

fn sampler() -> Outcome {
    let scores = [0.8, -0.3, 0.1, 1.4];
    let n_draws = 200_000u64;
    let support: Vec<usize> = (0..4).collect();
    let prefixes = ordered_prefixes(&support, 2);
    let critical = ChiSquared::new((prefixes.len() - 1) as f64).unwrap().inverse_cdf(0.999);
    let policy = direct(&scores);
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut tree = PlSampler::new(&scores);
    let mut counts: Vec<HashMap<Vec<usize>, u64>> = vec![HashMap::new(); 3];
    let mut order = Vec::new();
    for _ in 0..n_draws {
        tree.sample(2, &mut rng, &mut order);
        *counts[0].entry(order.clone()).or_default() += 1;
        *counts[1].entry(pl::gumbel_top_k(&scores, 2, &mut rng)).or_default() += 1;
        let y = policy.sample_topk(0, &support, 2, &mut rng).unwrap();
        *counts[2].entry(y.into_items()).or_default() += 1;
    }
    let mut passed = true;
    let mut parts = Vec::new();
    for (name, c) in ["sum-tree", "gumbel", "policy"].iter().zip(&counts) {
        let mut chi2 = 0.0;
        let mut tv = 0.0;
        for o in &prefixes {
            let p = pl_prob(&scores, o);
            let obs = c.get(o).copied().unwrap_or(0) as f64;
            chi2 += (obs - p * n_draws as f64).powi(2) / (p * n_draws as f64);
            tv += (obs / n_draws as f64 - p).abs() / 2.0;
        }
        passed &= chi2 < critical && tv < 0.01;
        parts.push(format!("{name} chi2 {chi2:.2} TV {tv:.4}"));
    }
    Outcome {
        passed,
        detail: format!("{} (critical {critical:.2}, {n_draws} draws)", parts.join(", ")),
    }
}

// ---------------------------------------------------------------------------
// 3

/// Exact IPS value of one record as a function of both stages' scores.
fn record_value(cand: &[f64], rer: &[f64], k2: usize, k: usize, clicked: &[usize], rho0: &[f64]) -> f64 {
    let w = doc_weights_oracle(cand, rer, k2, k);
    clicked.iter().map(|&d| w[d] / rho0[d]).sum()
}

fn gradients() -> Outcome {
    let em = ExaminationModel::default();
    let h = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut worst_rel: f64 = 0.0;
    let mut worst_z: f64 = 0.0;
    let mut coords = 0;
    for world in 0..5u64 {
        let n = rng.random_range(4..=5usize);
        let (k2, k) = (3, 2);
        let cand = normals(n, &mut rng);
        let rer = normals(n, &mut rng);
        let p = pipeline(&cand, &rer, k2, k);
        let shown = vec![0, 1];
        let clicks = vec![true, rng.random_bool(0.5)];
        let clicked: Vec<usize> = shown.iter().zip(&clicks).filter(|(_, &c)| c).map(|(&d, _)| d).collect();
        let rho0_v: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..1.0)).collect();
        let mut rho0 = PropensityTable::new(0.01).unwrap();
        for (d, &v) in rho0_v.iter().enumerate() {
            rho0.insert(0, d, v);
        }
        let record = ClickRecord::new(0, Ranking::new(shown).unwrap(), clicks).unwrap();
        for stage in [Stage::Candidate, Stage::Reranker] {
            let g = exact::record_score_grad(&p, stage, &record, &rho0, &em).unwrap();
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
                let fd = (record_value(&cp, &rp, k2, k, &clicked, &rho0_v)
                    - record_value(&cm, &rm, k2, k, &clicked, &rho0_v))
                    / (2.0 * h);
                let rel = (g[j] - fd).abs() / g[j].abs().max(fd.abs()).max(1e-8);
                worst_rel = worst_rel.max(rel);
            }
            // 100 batches of 200 draws
            let settings = GradientSettings {
                n_mc: 200,
                exam: em,
                control_variate: false,
            };
            let batches: Vec<Vec<f64>> = (0..100u64)
                .map(|b| {
                    let mut r = twostage_cltr::rng::stream(SEED, &[world, stage as u64, b]);
                    two_stage_score_grad(&p, stage, &record, &rho0, &settings, &mut r).unwrap()
                })
                .collect();
            for j in 0..n {
                let col: Vec<f64> = batches.iter().map(|b| b[j]).collect();
                let (m, se) = mean_and_se(&col);
                let z = if (m - g[j]).abs() < 1e-12 { 0.0 } else { (m - g[j]).abs() / se };
                worst_z = worst_z.max(z);
                coords += 1;
            }
        }
    }
    Outcome {
        passed: worst_rel < 1e-6 && worst_z <= 3.0,
        detail: format!(
            "max relative error vs central differences {worst_rel:.2e} (tol 1e-6); \
             20k-draw MC max |z| {worst_z:.2} over {coords} coordinates (tol 3)"
        ),
    }
}

// ---------------------------------------------------------------------------
// 4

fn slot_mass_check() -> Outcome {
    let em = ExaminationModel::default();
    let harmonic = |k: usize| (1..=k.min(10)).map(|j| 1.0 / j as f64).sum::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut worst_exact: f64 = 0.0;
    let mut worst_z: f64 = 0.0;
    let mut worst_abs: f64 = 0.0;
    let mut check_mc = |p: &TwoStage, target: f64, rng: &mut ChaCha8Rng| {
        // per-draw slot mass of 300 draws
        let masses: Vec<f64> = (0..300)
            .map(|_| {
                let (_, yr) = p.sample(0, rng).unwrap();
                (1..=yr.len()).map(exam).sum()
            })
            .collect();
        let (m, se) = mean_and_se(&masses);
        let z = if (m - target).abs() <= 1e-12 { 0.0 } else { (m - target).abs() / se };
        worst_z = worst_z.max(z);
        let est = doc_weights_mc(p, 0, 300, &em, rng).unwrap();
        worst_abs = worst_abs.max((slot_mass(&est) - target).abs());
    };
    for _ in 0..20 {
        let n = rng.random_range(2..=6usize);
        let k2 = rng.random_range(1..=n.min(5));
        let k = rng.random_range(1..=k2);
        let (c, r) = (normals(n, &mut rng), normals(n, &mut rng));
        let p = pipeline(&c, &r, k2, k);
        let exact_mass = slot_mass(&doc_weights_exact(&p, 0, &em).unwrap());
        worst_exact = worst_exact.max((exact_mass - harmonic(k)).abs());
        check_mc(&p, exact_mass, &mut rng);
    }
    // catalog-sized pipelines, including a list longer than the examined depth
    for (n, k2, k) in [(1000, 100, 10), (300, 40, 15)] {
        let (c, r) = (normals(n, &mut rng), normals(n, &mut rng));
        check_mc(&pipeline(&c, &r, k2, k), harmonic(k), &mut rng);
    }
    Outcome {
        passed: worst_exact < 1e-12 && worst_z <= 3.0 && worst_abs < 1e-9,
        detail: format!(
            "enumeration max |sum rho - H_K| {worst_exact:.1e}; 300-draw MC max |z| {worst_z:.2}, \
             estimator max deviation {worst_abs:.1e}"
        ),
    }
}

// ---------------------------------------------------------------------------
// 5 and 6

fn desk_dir() -> PathBuf {
    std::env::var_os("TWOSTAGE_ACCEPTANCE_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance-desk"))
}

fn desk_grid() -> (ResultsGrid, usize, usize) {
    let mut cfg = ExperimentConfig::desk();
    cfg.output_dir = desk_dir();
    let k2 = 100;
    let mut cells: Vec<CellKey> = [Regime::Baseline, Regime::Independent]
        .iter()
        .map(|&regime| CellKey { regime, k2, n: 100_000 })
        .collect();
    for n in [25_000, 50_000, 100_000] {
        cells.push(CellKey {
            regime: Regime::Joint,
            k2,
            n,
        });
    }
    let mut exp = Experiment::new(cfg).unwrap();
    let runs = exp.config().n_runs;
    let reused = (0..runs)
        .flat_map(|run| cells.iter().map(move |&c| (c, run)))
        .filter(|&(c, run)| exp.checkpoint(c, run).is_some())
        .count();
    let trained = cells.len() * runs - reused;
    let (grid, failures) = exp
        .run_cells(&cells, true, |r| eprintln!("  {} run {}: {:.4}", r.cell, r.run, r.ndcg10))
        .unwrap();
    assert!(failures.is_empty(), "{:?}", failures.iter().map(|f| &f.message).collect::<Vec<_>>());
    (grid, trained, reused)
}

fn stats(grid: &ResultsGrid, regime: Regime, n: usize) -> (f64, f64) {
    let s = grid.stats(&CellKey { regime, k2: 100, n }).expect("cell present");
    assert_eq!(s.values.len(), 5);
    (s.mean, s.se)
}

fn ordering(grid: &ResultsGrid) -> Outcome {
    let (j, sj) = stats(grid, Regime::Joint, 100_000);
    let (i, _) = stats(grid, Regime::Independent, 100_000);
    let (b, sb) = stats(grid, Regime::Baseline, 100_000);
    let pooled = (sj * sj + sb * sb).sqrt();
    Outcome {
        passed: j > i && i > b && j - b > 2.0 * pooled,
        detail: format!(
            "K2=100 N=100k, 5 seeds: joint {j:.4}, independent {i:.4}, baseline {b:.4}; \
             joint - baseline {:.4} vs 2 x pooled SE {:.4}",
            j - b,
            2.0 * pooled
        ),
    }
}

fn data_size_trend(grid: &ResultsGrid) -> Outcome {
    let points: Vec<(usize, f64, f64)> = [25_000, 50_000, 100_000]
        .iter()
        .map(|&n| {
            let (m, se) = stats(grid, Regime::Joint, n);
            (n, m, se)
        })
        .collect();
    let mut inversions = 0;
    let mut within = true;
    for w in points.windows(2) {
        let ((_, m0, s0), (_, m1, s1)) = (w[0], w[1]);
        if m1 < m0 {
            inversions += 1;
            within &= m0 - m1 <= (s0 * s0 + s1 * s1).sqrt();
        }
    }
    let listing: Vec<String> = points.iter().map(|(n, m, s)| format!("N={n}: {m:.4} ({s:.4})")).collect();
    Outcome {
        passed: inversions == 0 || (inversions == 1 && within),
        detail: format!("joint K2=100: {}; {inversions} inversion(s)", listing.join(", ")),
    }
}

// ---------------------------------------------------------------------------
// 7

fn examination() -> Outcome {
    let em = ExaminationModel::default();
    let bad: Vec<usize> = (1..=1000)
        .filter(|&k| {
            let want = if k <= 10 { 1.0 / k as f64 } else { 0.0 };
            em.prob(k) != want
        })
        .collect();
    let zero_rank_ok = em.prob_opt(None) == 0.0;
    Outcome {
        passed: bad.is_empty() && zero_rank_ok,
        detail: format!("prob(k) checked for k = 1..1000, {} mismatches", bad.len()),
    }
}

// ---------------------------------------------------------------------------
// 8

fn small_config(out: PathBuf) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::desk();
    cfg.synthetic.n_users = 260;
    cfg.synthetic.n_items = 180;
    cfg.max_users = None;
    cfg.max_items = None;
    cfg.k2_list = vec![20];
    cfg.n_list = vec![1500, 3000];
    cfg.n_runs = 2;
    cfg.logging_frac = 0.1;
    cfg.dim = 8;
    cfg.logging_fit.epochs = 2;
    cfg.logging_fit.n_mc = 10;
    cfg.ndcg_samples = 10;
    cfg.train.n_mc = 16;
    cfg.train.max_epochs = 2;
    cfg.train.pretrain_epochs = 1;
    cfg.train.eval_samples = 16;
    cfg.train.ndcg_every = 1;
    cfg.train.ndcg_samples = 5;
    cfg.output_dir = out;
    cfg
}

/// Every CSV a run writes, history without the wall-clock column.
fn run_with_threads(threads: usize, dir: PathBuf) -> Vec<(String, Vec<u8>)> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
    pool.install(|| {
        let mut exp = Experiment::new(small_config(dir.clone())).unwrap();
        exp.keep_history = true;
        let cells = exp.config().cells();
        let (grid, failures) = exp.run_cells(&cells, false, |_| {}).unwrap();
        assert!(failures.is_empty());
        experiment::write_outputs(&grid, &dir).unwrap();
        let mut files = vec![
            ("grid.csv".to_string(), fs::read(dir.join("grid.csv")).unwrap()),
            ("summary".to_string(), experiment::render_table(&grid).1.into_bytes()),
        ];
        for (cell, run, outcome) in &exp.histories {
            let mut buf = Vec::new();
            write_history_csv(&outcome.history, &mut buf).unwrap();
            let text: String = String::from_utf8(buf)
                .unwrap()
                .lines()
                .map(|l| l.rsplit_once(',').unwrap().0.to_string() + "\n")
                .collect();
            files.push((format!("history {cell} run {run}"), text.into_bytes()));
        }
        files
    })
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let one = run_with_threads(1, tmp.path().join("one"));
    let four = run_with_threads(4, tmp.path().join("four"));
    let again = run_with_threads(1, tmp.path().join("again"));
    let differing: Vec<&str> = one
        .iter()
        .zip(&four)
        .zip(&again)
        .filter(|((a, b), c)| a.1 != b.1 || a.1 != c.1)
        .map(|((a, _), _)| a.0.as_str())
        .collect();
    Outcome {
        passed: one.len() == four.len() && differing.is_empty(),
        detail: format!(
            "{} CSV outputs over 3 regimes x 2 sizes x 2 runs, 1 vs 4 workers and a repeat: {} differ",
            one.len(),
            differing.len()
        ),
    }
}

// ---------------------------------------------------------------------------

fn main() {
    // `cargo test -- --list` and filters are not meaningful for this suite
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut failed = Vec::new();
    let mut run = |id: usize, name: &str, f: &dyn Fn() -> Outcome| {
        let started = Instant::now();
        let outcome = f();
        report(id, name, started, &outcome);
        if !outcome.passed {
            failed.push(id);
        }
    };
    run(1, "unbiasedness", &unbiasedness);
    run(2, "sampler", &sampler);
    run(3, "gradients", &gradients);
    run(4, "slot mass", &slot_mass_check);
    run(7, "examination", &examination);
    run(8, "determinism", &determinism);
    let started = Instant::now();
    eprintln!("desk grid checkpoints: {}", desk_dir().display());
    let (grid, trained, reused) = desk_grid();
    eprintln!("desk grid: {reused} cell runs from checkpoints, {trained} trained now");
    let ordering = ordering(&grid);
    report(5, "method ordering", started, &ordering);
    let trend = data_size_trend(&grid);
    report(6, "data-size trend", started, &trend);
    if !ordering.passed {
        failed.push(5);
    }
    if !trend.passed {
        failed.push(6);
    }
    failed.sort_unstable();
    if failed.is_empty() {
        println!("acceptance: all 8 criteria passed");
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
