use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{RatingsTable, RelevanceMatrix};
use crate::error::{Error, Result};
use crate::{rng, ItemId, UserId};

/// Embedding dimension used throughout the experiments.
pub const DEFAULT_DIM: usize = 50;

/// User and item embedding tables; `score(u, d) = <user_vecs[u], item_vecs[d]>`.
/// Both tables are row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorModel {
    dim: usize,
    n_users: usize,
    n_items: usize,
    user_vecs: Vec<f64>,
    item_vecs: Vec<f64>,
}

impl FactorModel {
    pub fn zeros(n_users: usize, n_items: usize, dim: usize) -> Self {
        Self {
            dim,
            n_users,
            n_items,
            user_vecs: vec![0.0; n_users * dim],
            item_vecs: vec![0.0; n_items * dim],
        }
    }

    pub fn from_tables(dim: usize, user_vecs: Vec<f64>, item_vecs: Vec<f64>) -> Result<Self> {
        if dim == 0 || user_vecs.len() % dim != 0 || item_vecs.len() % dim != 0 {
            return Err(Error::Argument(format!(
                "tables of {} / {} entries do not split into rows of {dim}",
                user_vecs.len(),
                item_vecs.len()
            )));
        }
        if user_vecs.iter().chain(&item_vecs).any(|x| !x.is_finite()) {
            return Err(Error::Argument("non-finite embedding entry".into()));
        }
        Ok(Self {
            dim,
            n_users: user_vecs.len() / dim,
            n_items: item_vecs.len() / dim,
            user_vecs,
            item_vecs,
        })
    }

    /// A model whose scores are given directly: `score(u, d) = scores[u][d]`.
    /// Item embeddings are the identity basis and user embeddings carry the
    /// score rows, so gradients w.r.t. a user row are gradients w.r.t. scores.
    pub fn with_direct_scores(scores: &[Vec<f64>]) -> Self {
        let n_items = scores.first().map_or(0, Vec::len);
        let mut user_vecs = Vec::with_capacity(scores.len() * n_items);
        for row in scores {
            assert_eq!(row.len(), n_items, "ragged score table");
            user_vecs.extend_from_slice(row);
        }
        let mut item_vecs = vec![0.0; n_items * n_items];
        for d in 0..n_items {
            item_vecs[d * n_items + d] = 1.0;
        }
        Self {
            dim: n_items,
            n_users: scores.len(),
            n_items,
            user_vecs,
            item_vecs,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn user(&self, u: UserId) -> &[f64] {
        &self.user_vecs[u * self.dim..(u + 1) * self.dim]
    }

    pub fn item(&self, d: ItemId) -> &[f64] {
        &self.item_vecs[d * self.dim..(d + 1) * self.dim]
    }

    pub fn user_mut(&mut self, u: UserId) -> &mut [f64] {
        &mut self.user_vecs[u * self.dim..(u + 1) * self.dim]
    }

    pub fn item_mut(&mut self, d: ItemId) -> &mut [f64] {
        &mut self.item_vecs[d * self.dim..(d + 1) * self.dim]
    }

    pub fn score(&self, u: UserId, d: ItemId) -> f64 {
        dot(self.user(u), self.item(d))
    }

    pub fn is_finite(&self) -> bool {
        self.user_vecs
            .iter()
            .chain(&self.item_vecs)
            .all(|x| x.is_finite())
    }

    /// Order-sensitive FNV hash of every parameter's bit pattern.
    pub fn checksum(&self) -> u64 {
        self.user_vecs
            .iter()
            .chain(&self.item_vecs)
            .fold(0xcbf2_9ce4_8422_2325u64, |h, x| {
                (h ^ x.to_bits()).wrapping_mul(0x0000_0100_0000_01B3)
            })
    }

    /// Squared Frobenius distance between the model's score matrix and the
    /// sparse matrix given by `entries`.
    pub fn squared_error(&self, entries: &[(usize, usize, f64)]) -> f64 {
        let gram = |t: &[f64], n: usize| {
            let mut g = vec![0.0; self.dim * self.dim];
            for r in 0..n {
                let row = &t[r * self.dim..(r + 1) * self.dim];
                for a in 0..self.dim {
                    for b in 0..self.dim {
                        g[a * self.dim + b] += row[a] * row[b];
                    }
                }
            }
            g
        };
        let gu = gram(&self.user_vecs, self.n_users);
        let gv = gram(&self.item_vecs, self.n_items);
        let model_sq: f64 = gu.iter().zip(&gv).map(|(a, b)| a * b).sum();
        let (mut data_sq, mut cross) = (0.0, 0.0);
        for &(u, d, a) in entries {
            data_sq += a * a;
            cross += a * self.score(u, d);
        }
        (data_sq - 2.0 * cross + model_sq).max(0.0)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn relevance_entries(m: &RelevanceMatrix) -> Vec<(usize, usize, f64)> {
    (0..m.n_users())
        .flat_map(|u| m.relevant_items(u).iter().map(move |&d| (u, d, 1.0)))
        .collect()
}

/// Rank-`dim` factorization of the binary relevance matrix.
pub fn svd_init(matrix: &RelevanceMatrix, dim: usize, seed: u64) -> Result<FactorModel> {
    truncated_svd(
        &relevance_entries(matrix),
        matrix.n_users(),
        matrix.n_items(),
        dim,
        seed,
    )
}

/// Rank-`dim` factorization of the raw 1–5 rating matrix.
pub fn svd_init_ratings(ratings: &RatingsTable, dim: usize, seed: u64) -> Result<FactorModel> {
    let entries: Vec<_> = ratings
        .entries
        .iter()
        .map(|e| (e.user, e.item, e.rating as f64))
        .collect();
    truncated_svd(&entries, ratings.n_users(), ratings.n_items(), dim, seed)
}

const OVERSAMPLE: usize = 10;
const POWER_ITERS: usize = 6;

/// Randomized subspace iteration on a sparse `n_rows x n_cols` matrix.
/// Returns `U diag(sqrt(s))` as user rows and `V diag(sqrt(s))` as item rows.
pub fn truncated_svd(
    entries: &[(usize, usize, f64)],
    n_rows: usize,
    n_cols: usize,
    dim: usize,
    seed: u64,
) -> Result<FactorModel> {
    let full = n_rows.min(n_cols);
    if dim == 0 || dim > full {
        return Err(Error::Config(format!(
            "svd dim {dim} must lie in 1..={full} for a {n_rows}x{n_cols} matrix"
        )));
    }
    let width = (dim + OVERSAMPLE).min(full);
    let mut rng = rng::stream(seed, &[rng::label("svd_init")]);
    let omega = DMatrix::<f64>::from_fn(n_cols, width, |_, _| StandardNormal.sample(&mut rng));

    // A * X and A^T * X for the sparse A.
    let mul = |x: &DMatrix<f64>| {
        let mut y = DMatrix::<f64>::zeros(n_rows, x.ncols());
        for &(r, c, a) in entries {
            for k in 0..x.ncols() {
                y[(r, k)] += a * x[(c, k)];
            }
        }
        y
    };
    let mul_t = |x: &DMatrix<f64>| {
        let mut y = DMatrix::<f64>::zeros(n_cols, x.ncols());
        for &(r, c, a) in entries {
            for k in 0..x.ncols() {
                y[(c, k)] += a * x[(r, k)];
            }
        }
        y
    };

    let mut q = mul(&omega).qr().q();
    for _ in 0..POWER_ITERS {
        let z = mul_t(&q).qr().q();
        q = mul(&z).qr().q();
    }
    // B = Q^T A, formed as (A^T Q)^T.
    let b = mul_t(&q).transpose();
    let svd = b.svd(true, true);
    let (ub, vt) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
    let sv = svd.singular_values;
    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&a, &b| sv[b].total_cmp(&sv[a]).then(a.cmp(&b)));

    let u = &q * &ub;
    let mut user_vecs = vec![0.0; n_rows * dim];
    let mut item_vecs = vec![0.0; n_cols * dim];
    for (k, &j) in order.iter().take(dim).enumerate() {
        let root = sv[j].max(0.0).sqrt();
        for r in 0..n_rows {
            user_vecs[r * dim + k] = u[(r, j)] * root;
        }
        for c in 0..n_cols {
            item_vecs[c * dim + k] = vt[(j, c)] * root;
        }
    }
    FactorModel::from_tables(dim, user_vecs, item_vecs)
}
