use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::{IdMap, RelevanceMatrix};
use crate::error::{Error, Result};
use crate::{rng, UserId};

/// Disjoint user populations: logging-policy training, click simulation,
/// and evaluation. Each list is sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserSplit {
    pub logging_users: Vec<UserId>,
    pub interaction_users: Vec<UserId>,
    pub eval_users: Vec<UserId>,
}

#[derive(Serialize, Deserialize)]
struct PersistedSplit {
    logging_users: Vec<u64>,
    interaction_users: Vec<u64>,
    eval_users: Vec<u64>,
}

pub fn split_users(
    matrix: &RelevanceMatrix,
    eval_frac: f64,
    logging_frac: f64,
    seed: u64,
) -> Result<UserSplit> {
    for (name, f) in [("eval_frac", eval_frac), ("logging_frac", logging_frac)] {
        if !(f > 0.0 && f < 1.0) {
            return Err(Error::Config(format!("{name}={f} must lie in (0, 1)")));
        }
    }
    if eval_frac + logging_frac >= 1.0 {
        return Err(Error::Config(format!(
            "eval_frac + logging_frac = {} leaves no interaction users",
            eval_frac + logging_frac
        )));
    }
    let n = matrix.n_users();
    let n_eval = (eval_frac * n as f64).round() as usize;
    let n_logging = (logging_frac * n as f64).round() as usize;
    let mut users: Vec<UserId> = (0..n).collect();
    users.shuffle(&mut rng::stream(seed, &[rng::label("split_users")]));

    let mut eval_users = users[..n_eval].to_vec();
    let mut logging_users = users[n_eval..n_eval + n_logging].to_vec();
    let mut interaction_users = users[n_eval + n_logging..].to_vec();
    eval_users.sort_unstable();
    logging_users.sort_unstable();
    interaction_users.sort_unstable();
    Ok(UserSplit {
        logging_users,
        interaction_users,
        eval_users,
    })
}

impl UserSplit {
    /// Persist as JSON arrays of original user ids.
    pub fn save(&self, ids: &IdMap, path: impl AsRef<Path>) -> Result<()> {
        let orig = |v: &[UserId]| v.iter().map(|&u| ids.user_id(u)).collect();
        let p = PersistedSplit {
            logging_users: orig(&self.logging_users),
            interaction_users: orig(&self.interaction_users),
            eval_users: orig(&self.eval_users),
        };
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_string_pretty(&p)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(ids: &IdMap, path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let p: PersistedSplit = serde_json::from_str(&text)?;
        let index = ids.user_index();
        let dense = |v: Vec<u64>| -> Result<Vec<UserId>> {
            v.into_iter()
                .map(|o| {
                    index
                        .get(&o)
                        .copied()
                        .ok_or_else(|| Error::Data(format!("unknown user id {o} in split file")))
                })
                .collect()
        };
        Ok(Self {
            logging_users: dense(p.logging_users)?,
            interaction_users: dense(p.interaction_users)?,
            eval_users: dense(p.eval_users)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn matrix(n: usize) -> RelevanceMatrix {
        RelevanceMatrix::from_positives(1, vec![vec![0]; n])
    }

    #[test]
    fn movielens_sized_eval_population() {
        let s = split_users(&matrix(6040), 0.10, 0.03, 1).unwrap();
        assert_eq!(s.eval_users.len(), 604);
        assert_eq!(s.logging_users.len(), 181);
        assert_eq!(s.interaction_users.len(), 6040 - 604 - 181);
    }

    #[test]
    fn partition_is_disjoint_and_covering() {
        let s = split_users(&matrix(997), 0.1, 0.03, 9).unwrap();
        let mut all = HashSet::new();
        for u in s
            .eval_users
            .iter()
            .chain(&s.logging_users)
            .chain(&s.interaction_users)
        {
            assert!(all.insert(*u), "user {u} appears twice");
        }
        assert_eq!(all.len(), 997);
    }

    #[test]
    fn same_seed_same_split() {
        let m = matrix(200);
        assert_eq!(
            split_users(&m, 0.1, 0.03, 5).unwrap(),
            split_users(&m, 0.1, 0.03, 5).unwrap()
        );
        assert_ne!(
            split_users(&m, 0.1, 0.03, 5).unwrap(),
            split_users(&m, 0.1, 0.03, 6).unwrap()
        );
    }

    #[test]
    fn bad_fractions_are_config_errors() {
        let m = matrix(10);
        assert!(matches!(split_users(&m, 0.5, 0.6, 0), Err(Error::Config(_))));
        assert!(matches!(split_users(&m, 0.0, 0.1, 0), Err(Error::Config(_))));
        assert!(matches!(split_users(&m, 0.1, 1.2, 0), Err(Error::Config(_))));
    }

    #[test]
    fn persisted_split_uses_original_ids() {
        let ids = IdMap {
            users: (0..20).map(|u| 1000 + u).collect(),
            items: vec![1],
        };
        let s = split_users(&matrix(20), 0.1, 0.1, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("split.json");
        s.save(&ids, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains(&format!("{}", 1000 + s.eval_users[0])));
        assert_eq!(UserSplit::load(&ids, &path).unwrap(), s);
    }
}
