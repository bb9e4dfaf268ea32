use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ItemId;

/// An ordered list of distinct items. Position 1 is the top slot.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Ranking {
    items: Vec<ItemId>,
}

impl Ranking {
    pub fn new(items: Vec<ItemId>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(items.len());
        if let Some(dup) = items.iter().find(|d| !seen.insert(**d)) {
            return Err(Error::Argument(format!("item {dup} appears twice in ranking")));
        }
        Ok(Self { items })
    }

    /// Caller guarantees the items are distinct.
    pub(crate) fn from_distinct(items: Vec<ItemId>) -> Self {
        debug_assert!(Self::new(items.clone()).is_ok());
        Self { items }
    }

    pub fn items(&self) -> &[ItemId] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// 1-based position of `item`, or `None` when it is not in the list.
    pub fn rank_of(&self, item: ItemId) -> Option<usize> {
        self.items.iter().position(|&d| d == item).map(|p| p + 1)
    }

    pub fn contains(&self, item: ItemId) -> bool {
        self.items.contains(&item)
    }

    pub fn into_items(self) -> Vec<ItemId> {
        self.items
    }
}
