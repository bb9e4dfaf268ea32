//! Ratings ingestion, binary relevance, user populations and SVD factors.

mod factors;
mod ratings;
mod relevance;
mod split;
pub mod synth;

pub use factors::{svd_init, svd_init_ratings, truncated_svd, FactorModel, DEFAULT_DIM};
pub(crate) use factors::dot;
pub use ratings::{load_ratings, parse_ratings, IdMap, Rating, RatingsTable};
pub use relevance::{binarize, RelevanceMatrix, POSITIVE_ABOVE};
pub use split::{split_users, UserSplit};
