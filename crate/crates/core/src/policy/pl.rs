//! Plackett-Luce math on raw score vectors.
//!
//! Items are addressed by their index into the score slice. A ranking of
//! length `L` over `n` scores has probability
//! `prod_j exp(s[o_j]) / Z_j`, where `Z_j` sums `exp(s)` over the items not
//! yet placed before slot `j`. Everything here works with `log Z_j`, built
//! backwards from the log-mass of the never-placed items so that no step
//! subtracts one large quantity from another.

use rand::Rng;
use rand_distr::{Distribution, Gumbel};

/// `ln(exp(a) + exp(b))`, tolerant of `-inf`.
pub fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

pub fn log_sum_exp(xs: impl IntoIterator<Item = f64>) -> f64 {
    let xs: Vec<f64> = xs.into_iter().collect();
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Mark which indices `order` places; `None` for unplaced.
fn placement(n: usize, order: &[usize]) -> Vec<Option<usize>> {
    let mut pos = vec![None; n];
    for (j, &i) in order.iter().enumerate() {
        assert!(i < n, "index {i} outside {n} scores");
        assert!(pos[i].is_none(), "index {i} placed twice");
        pos[i] = Some(j);
    }
    pos
}

/// `log Z_j` for every slot `j` of `order`, given the log-mass of the
/// unplaced items.
pub fn log_normalizers_from_tail(scores: &[f64], order: &[usize], log_tail: f64) -> Vec<f64> {
    let mut log_z = vec![0.0; order.len()];
    let mut acc = log_tail;
    for j in (0..order.len()).rev() {
        acc = log_add_exp(acc, scores[order[j]]);
        log_z[j] = acc;
    }
    log_z
}

pub fn log_normalizers(scores: &[f64], order: &[usize]) -> Vec<f64> {
    let pos = placement(scores.len(), order);
    let tail = log_sum_exp(
        scores
            .iter()
            .zip(&pos)
            .filter(|(_, p)| p.is_none())
            .map(|(s, _)| *s),
    );
    log_normalizers_from_tail(scores, order, tail)
}

pub fn log_prob(scores: &[f64], order: &[usize]) -> f64 {
    let log_z = log_normalizers(scores, order);
    order
        .iter()
        .zip(&log_z)
        .map(|(&i, lz)| scores[i] - lz)
        .sum()
}

/// `D_p = sum_{j<=p} Z_p / Z_j`, the ratio-weighted prefix sums used to
/// evaluate `sum_{j<=p} exp(s_i) / Z_j` as `exp(s_i - log Z_p) * D_p`.
/// Every ratio is at most 1.
pub fn normalizer_prefix(log_z: &[f64]) -> Vec<f64> {
    let mut d = Vec::with_capacity(log_z.len());
    let mut acc = 0.0;
    for j in 0..log_z.len() {
        if j > 0 {
            acc *= (log_z[j] - log_z[j - 1]).exp();
        }
        acc += 1.0;
        d.push(acc);
    }
    d
}

/// Gradient of `log_prob(scores, order)` with respect to every score.
/// Placed item at slot `p`: `1 - sum_{j<=p} softmax_j`; unplaced:
/// `- sum_{j<=L} softmax_j`.
pub fn grad_log_prob(scores: &[f64], order: &[usize]) -> Vec<f64> {
    let n = scores.len();
    let mut grad = vec![0.0; n];
    if order.is_empty() {
        return grad;
    }
    let pos = placement(n, order);
    let log_z = log_normalizers(scores, order);
    let d = normalizer_prefix(&log_z);
    let last = order.len() - 1;
    for i in 0..n {
        let p = pos[i].unwrap_or(last);
        let mass = (scores[i] - log_z[p]).exp() * d[p];
        grad[i] = if pos[i].is_some() { 1.0 - mass } else { -mass };
    }
    grad
}

/// Top-`l` indices under independent standard Gumbel perturbation, which is
/// a draw from the Plackett-Luce prefix distribution.
pub fn gumbel_top_k<R: Rng + ?Sized>(scores: &[f64], l: usize, rng: &mut R) -> Vec<usize> {
    assert!(l <= scores.len(), "prefix longer than support");
    let gumbel = Gumbel::new(0.0, 1.0).expect("valid gumbel");
    let mut keyed: Vec<(f64, usize)> = scores
        .iter()
        .enumerate()
        .map(|(i, &s)| (s + gumbel.sample(rng), i))
        .collect();
    let by_key = |a: &(f64, usize), b: &(f64, usize)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
    if l == 0 {
        return Vec::new();
    }
    if l < keyed.len() {
        keyed.select_nth_unstable_by(l - 1, by_key);
        keyed.truncate(l);
    }
    keyed.sort_unstable_by(by_key);
    keyed.into_iter().map(|(_, i)| i).collect()
}

/// All ordered `l`-prefixes of `0..n`, in lexicographic order.
pub fn ordered_prefixes(n: usize, l: usize) -> Vec<Vec<usize>> {
    fn go(n: usize, l: usize, cur: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if cur.len() == l {
            out.push(cur.clone());
            return;
        }
        for i in 0..n {
            if !used[i] {
                used[i] = true;
                cur.push(i);
                go(n, l, cur, used, out);
                cur.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    if l <= n {
        go(n, l, &mut Vec::with_capacity(l), &mut vec![false; n], &mut out);
    }
    out
}
