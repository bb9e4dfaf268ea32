//! Synthetic ratings in the MovieLens shape.
//!
//! Users and items get latent taste vectors; item popularity follows a
//! log-normal law; each user rates a popularity- and taste-skewed subset of
//! the catalog, and ratings are thresholded noisy affinities. The output is a
//! [`RatingsTable`] that can be written as `ratings.dat` and fed through the
//! regular loader.

use rand::Rng;
use rand_distr::{Distribution, Gumbel, LogNormal, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::RatingsTable;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub latent_dim: usize,
    /// Mean number of ratings per user (minimum 20, as in MovieLens-1M).
    pub mean_ratings: f64,
    /// Weight of taste vs. popularity when choosing which items get rated.
    pub taste_selection: f64,
    /// Std-dev of the rating noise on the standardized affinity scale.
    pub rating_noise: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_users: 1500,
            n_items: 1500,
            latent_dim: 8,
            mean_ratings: 90.0,
            taste_selection: 1.0,
            rating_noise: 0.5,
            seed: 20240601,
        }
    }
}

const MIN_RATINGS: usize = 20;

pub fn generate(cfg: &SyntheticConfig) -> Result<RatingsTable> {
    if cfg.n_users == 0 || cfg.n_items < MIN_RATINGS || cfg.latent_dim == 0 {
        return Err(Error::Config(format!(
            "synthetic world needs users > 0, items >= {MIN_RATINGS}, latent_dim > 0"
        )));
    }
    let mut rng = rng::stream(cfg.seed, &[rng::label("synthetic")]);
    let k = cfg.latent_dim;
    let scale = 1.0 / (k as f64).sqrt();
    let latent = |n: usize, rng: &mut rng::Stream| -> Vec<f64> {
        (0..n * k)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                scale * z
            })
            .collect()
    };
    let users = latent(cfg.n_users, &mut rng);
    let items = latent(cfg.n_items, &mut rng);
    let quality = Normal::new(0.0, 0.4).expect("valid normal");
    let item_bias: Vec<f64> = (0..cfg.n_items).map(|_| quality.sample(&mut rng)).collect();
    let popularity = LogNormal::new(0.0, 1.2).expect("valid lognormal");
    let log_pop: Vec<f64> = (0..cfg.n_items)
        .map(|_| { let x: f64 = popularity.sample(&mut rng); x.ln() })
        .collect();
    let count_dist = LogNormal::new(
        (cfg.mean_ratings - MIN_RATINGS as f64).max(1.0).ln() - 0.5,
        1.0,
    )
    .expect("valid lognormal");
    let gumbel = Gumbel::new(0.0, 1.0).expect("valid gumbel");
    let noise = Normal::new(0.0, cfg.rating_noise).expect("valid normal");

    let mut raw = Vec::new();
    let mut ts = 978_300_000i64;
    for u in 0..cfg.n_users {
        let uv = &users[u * k..(u + 1) * k];
        let affinity: Vec<f64> = (0..cfg.n_items)
            .map(|d| {
                let iv = &items[d * k..(d + 1) * k];
                uv.iter().zip(iv).map(|(a, b)| a * b).sum::<f64>() * 2.5 + item_bias[d]
            })
            .collect();
        let m = (MIN_RATINGS + count_dist.sample(&mut rng).round() as usize).min(cfg.n_items);
        let mut keys: Vec<(f64, usize)> = (0..cfg.n_items)
            .map(|d| {
                let g: f64 = gumbel.sample(&mut rng);
                (log_pop[d] + cfg.taste_selection * affinity[d] + g, d)
            })
            .collect();
        keys.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        for &(_, d) in keys.iter().take(m) {
            let z = affinity[d] + noise.sample(&mut rng);
            let rating = match z {
                z if z < -0.9 => 1,
                z if z < -0.45 => 2,
                z if z < 0.0 => 3,
                z if z < 0.6 => 4,
                _ => 5,
            };
            ts += rng.random_range(1..120);
            raw.push((u as u64 + 1, d as u64 + 1, rating, ts));
        }
    }
    RatingsTable::from_raw(raw)
}
