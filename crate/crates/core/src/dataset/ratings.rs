use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{rng, ItemId, UserId};

/// One rating, with ids already remapped to dense indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rating {
    pub user: UserId,
    pub item: ItemId,
    pub rating: u8,
    pub timestamp: i64,
}

/// Dense index ↔ original id translation for users and items.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdMap {
    pub users: Vec<u64>,
    pub items: Vec<u64>,
}

impl IdMap {
    pub fn user_id(&self, u: UserId) -> u64 {
        self.users[u]
    }

    pub fn item_id(&self, d: ItemId) -> u64 {
        self.items[d]
    }

    pub fn user_index(&self) -> HashMap<u64, UserId> {
        self.users.iter().enumerate().map(|(i, &o)| (o, i)).collect()
    }

    pub fn item_index(&self) -> HashMap<u64, ItemId> {
        self.items.iter().enumerate().map(|(i, &o)| (o, i)).collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RatingsTable {
    pub entries: Vec<Rating>,
    pub ids: IdMap,
}

impl RatingsTable {
    pub fn n_users(&self) -> usize {
        self.ids.users.len()
    }

    pub fn n_items(&self) -> usize {
        self.ids.items.len()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Build from `(user, item, rating, timestamp)` tuples carrying original
    /// ids. Ids are remapped to dense indices in ascending original-id order.
    pub fn from_raw(raw: Vec<(u64, u64, u8, i64)>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(raw.len());
        for (i, &(u, d, r, _)) in raw.iter().enumerate() {
            if !(1..=5).contains(&r) {
                return Err(Error::Data(format!(
                    "entry {}: rating {r} outside 1..=5",
                    i + 1
                )));
            }
            if !seen.insert((u, d)) {
                return Err(Error::Data(format!(
                    "entry {}: duplicate rating for user {u}, item {d}",
                    i + 1
                )));
            }
        }
        let users: Vec<u64> = raw
            .iter()
            .map(|r| r.0)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let items: Vec<u64> = raw
            .iter()
            .map(|r| r.1)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let ids = IdMap { users, items };
        let (ui, ii) = (ids.user_index(), ids.item_index());
        let entries = raw
            .into_iter()
            .map(|(u, d, rating, timestamp)| Rating {
                user: ui[&u],
                item: ii[&d],
                rating,
                timestamp,
            })
            .collect();
        Ok(Self { entries, ids })
    }

    /// Restrict to the `max_items` most-rated items, then to a seeded
    /// uniform sample of at most `max_users` of the users that still have a
    /// rating. Ids are re-densified; original ids are preserved in the map.
    pub fn subsample(&self, max_users: usize, max_items: usize, seed: u64) -> Result<Self> {
        let mut counts = vec![0usize; self.n_items()];
        for e in &self.entries {
            counts[e.item] += 1;
        }
        let mut order: Vec<ItemId> = (0..self.n_items()).collect();
        order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
        let keep_items: HashSet<ItemId> = order.into_iter().take(max_items).collect();

        let mut users: Vec<UserId> = self
            .entries
            .iter()
            .filter(|e| keep_items.contains(&e.item))
            .map(|e| e.user)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        if users.len() > max_users {
            users.shuffle(&mut rng::stream(seed, &[rng::label("subsample")]));
            users.truncate(max_users);
        }
        let keep_users: HashSet<UserId> = users.into_iter().collect();

        let raw = self
            .entries
            .iter()
            .filter(|e| keep_items.contains(&e.item) && keep_users.contains(&e.user))
            .map(|e| {
                (
                    self.ids.users[e.user],
                    self.ids.items[e.item],
                    e.rating,
                    e.timestamp,
                )
            })
            .collect();
        Self::from_raw(raw)
    }

    /// Serialize in the `UserID::MovieID::Rating::Timestamp` line format.
    pub fn to_dat(&self) -> String {
        let mut out = String::with_capacity(self.entries.len() * 24);
        for e in &self.entries {
            out.push_str(&format!(
                "{}::{}::{}::{}\n",
                self.ids.users[e.user], self.ids.items[e.item], e.rating, e.timestamp
            ));
        }
        out
    }
}

fn parse_line(line: &str, lineno: usize) -> Result<(u64, u64, u8, i64)> {
    let fields: Vec<&str> = line.trim().split("::").collect();
    if fields.len() != 4 {
        return Err(Error::Parse {
            line: lineno,
            message: format!("expected 4 '::'-separated fields, got {}", fields.len()),
        });
    }
    let num = |s: &str, what: &str| -> Result<i64> {
        s.trim().parse::<i64>().map_err(|e| Error::Parse {
            line: lineno,
            message: format!("bad {what} {s:?}: {e}"),
        })
    };
    let user = num(fields[0], "user id")?;
    let item = num(fields[1], "item id")?;
    let rating = num(fields[2], "rating")?;
    let ts = num(fields[3], "timestamp")?;
    if user < 0 || item < 0 {
        return Err(Error::Parse {
            line: lineno,
            message: "negative id".into(),
        });
    }
    if !(1..=5).contains(&rating) {
        return Err(Error::Data(format!(
            "line {lineno}: rating {rating} outside 1..=5"
        )));
    }
    Ok((user as u64, item as u64, rating as u8, ts))
}

/// Parse `UserID::MovieID::Rating::Timestamp` lines. Blank lines are skipped.
pub fn parse_ratings(reader: impl Read) -> Result<RatingsTable> {
    let mut raw = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = parse_line(&line, lineno)?;
        if !seen.insert((rec.0, rec.1)) {
            return Err(Error::Data(format!(
                "line {lineno}: duplicate rating for user {}, item {}",
                rec.0, rec.1
            )));
        }
        raw.push(rec);
    }
    RatingsTable::from_raw(raw)
}

pub fn load_ratings(path: impl AsRef<Path>) -> Result<RatingsTable> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_ratings(f)
}
