use crate::dataset::RatingsTable;
use crate::{ItemId, UserId};

/// Ratings strictly above this value count as relevant.
pub const POSITIVE_ABOVE: u8 = 3;

/// Binary ground-truth relevance. Only positive pairs are stored; every
/// other `(user, item)` pair is implicitly 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelevanceMatrix {
    n_users: usize,
    n_items: usize,
    positives: Vec<Vec<ItemId>>,
}

impl RelevanceMatrix {
    /// `positives[u]` lists the relevant items of user `u`, in any order.
    pub fn from_positives(n_items: usize, mut positives: Vec<Vec<ItemId>>) -> Self {
        for row in &mut positives {
            row.sort_unstable();
            row.dedup();
            assert!(row.iter().all(|&d| d < n_items), "item index out of range");
        }
        Self {
            n_users: positives.len(),
            n_items,
            positives,
        }
    }

    /// Build from a dense 0/1 grid, `rows[u][d]`.
    pub fn from_dense(rows: &[Vec<u8>]) -> Self {
        let n_items = rows.first().map_or(0, Vec::len);
        let positives = rows
            .iter()
            .map(|r| {
                assert_eq!(r.len(), n_items, "ragged relevance grid");
                r.iter()
                    .enumerate()
                    .filter(|(_, &v)| v != 0)
                    .map(|(d, _)| d)
                    .collect()
            })
            .collect();
        Self::from_positives(n_items, positives)
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn rel(&self, user: UserId, item: ItemId) -> f64 {
        if self.is_relevant(user, item) {
            1.0
        } else {
            0.0
        }
    }

    pub fn is_relevant(&self, user: UserId, item: ItemId) -> bool {
        self.positives
            .get(user)
            .is_some_and(|row| row.binary_search(&item).is_ok())
    }

    /// Relevant items of `user`, ascending.
    pub fn relevant_items(&self, user: UserId) -> &[ItemId] {
        &self.positives[user]
    }

    pub fn n_positive(&self) -> usize {
        self.positives.iter().map(Vec::len).sum()
    }
}

/// Relevance is 1 exactly when the rating is 4 or 5.
pub fn binarize(ratings: &RatingsTable) -> RelevanceMatrix {
    let mut positives = vec![Vec::new(); ratings.n_users()];
    for e in &ratings.entries {
        if e.rating > POSITIVE_ABOVE {
            positives[e.user].push(e.item);
        }
    }
    RelevanceMatrix::from_positives(ratings.n_items(), positives)
}
