//! Two-stage counterfactual learning to rank.
//!
//! A candidate generator selects `K2` items from the full catalog, a
//! re-ranker orders `K` of those for display, and both are Plackett-Luce
//! policies over a bilinear factor model. The crate simulates position-biased
//! clicks on a logging pipeline, estimates exposure propensities from the
//! log, and trains the two stages from the clicks with an
//! inverse-propensity-scored objective whose gradients come from the
//! log-derivative (REINFORCE) trick.
//!
//! Module map:
//!
//! - [`dataset`]: ratings ingestion, binary relevance, user splits, SVD factors.
//! - [`policy`]: Plackett-Luce sampling, log-probabilities, gradients, enumeration.
//! - [`clicksim`]: examination model, click log simulation, propensity tables.
//! - [`estimator`]: two-stage document weights, IPS and true utilities, NDCG@10.
//! - [`trainer`]: REINFORCE gradients, sparse Adam, Baseline/Independent/Joint regimes.
//! - [`experiment`]: end-to-end cells, the results grid, table rendering.

pub mod clicksim;
pub mod dataset;
pub mod error;
pub mod estimator;
pub mod experiment;
pub mod policy;
pub mod reduce;
pub mod rng;
pub mod trainer;
pub mod validate;

pub use error::{Error, Result};

/// Dense 0-based user index.
pub type UserId = usize;
/// Dense 0-based item index.
pub type ItemId = usize;
