//! Interaction log ingestion, dense ID remapping and train/validation/test
//! splitting.
//!
//! Input files carry one interaction per line: `user_key item_key [timestamp]`,
//! separated by any whitespace. Lines starting with `#` and blank lines are
//! skipped. Remap tables are written as `internal_id original_key` lines.

use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawInteraction {
    pub user_key: String,
    pub item_key: String,
    pub timestamp: Option<i64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Interaction {
    pub user: usize,
    pub item: usize,
    pub timestamp: Option<i64>,
}

/// A de-duplicated set of implicit interactions over a fixed ID space.
///
/// Interactions are kept sorted by `(user, item)`.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionSet {
    n_users: usize,
    n_items: usize,
    interactions: Vec<Interaction>,
    user_items: Vec<Vec<usize>>,
}

impl InteractionSet {
    /// Builds a set over `n_users × n_items`. Duplicate `(user, item)` pairs
    /// collapse to the earliest timestamp.
    pub fn new(n_users: usize, n_items: usize, interactions: Vec<Interaction>) -> Result<Self> {
        let mut best: HashMap<(usize, usize), Option<i64>> =
            HashMap::with_capacity(interactions.len());
        for it in interactions {
            if it.user >= n_users || it.item >= n_items {
                return Err(Error::InvalidArgument(format!(
                    "interaction ({}, {}) outside {}x{} id space",
                    it.user, it.item, n_users, n_items
                )));
            }
            best.entry((it.user, it.item))
                .and_modify(|t| *t = earliest(*t, it.timestamp))
                .or_insert(it.timestamp);
        }
        let mut interactions: Vec<Interaction> = best
            .into_iter()
            .map(|((user, item), timestamp)| Interaction {
                user,
                item,
                timestamp,
            })
            .collect();
        interactions.sort_unstable();
        let mut user_items = vec![Vec::new(); n_users];
        for it in &interactions {
            user_items[it.user].push(it.item);
        }
        Ok(InteractionSet {
            n_users,
            n_items,
            interactions,
            user_items,
        })
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn len(&self) -> usize {
        self.interactions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.interactions.is_empty()
    }

    pub fn interactions(&self) -> &[Interaction] {
        &self.interactions
    }

    /// Sorted item ids the user interacted with.
    pub fn user_items(&self, user: usize) -> &[usize] {
        &self.user_items[user]
    }

    pub fn contains(&self, user: usize, item: usize) -> bool {
        user < self.n_users && self.user_items[user].binary_search(&item).is_ok()
    }

    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.interactions.iter().map(|it| (it.user, it.item))
    }

    pub fn has_timestamps(&self) -> bool {
        self.interactions.iter().all(|it| it.timestamp.is_some())
    }

    /// Users with at least one interaction, ascending.
    pub fn active_users(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.n_users).filter(|&u| !self.user_items[u].is_empty())
    }

    /// True when every user and item index occurs at least once.
    pub fn is_dense(&self) -> bool {
        let mut seen_items = vec![false; self.n_items];
        for it in &self.interactions {
            seen_items[it.item] = true;
        }
        self.user_items.iter().all(|v| !v.is_empty()) && seen_items.into_iter().all(|s| s)
    }

    fn item_presence(&self) -> Vec<bool> {
        let mut seen = vec![false; self.n_items];
        for it in &self.interactions {
            seen[it.item] = true;
        }
        seen
    }
}

fn earliest(a: Option<i64>, b: Option<i64>) -> Option<i64> {
    match (a, b) {
        (Some(x), Some(y)) => Some(x.min(y)),
        (x, None) => x,
        (None, y) => y,
    }
}

/// Bidirectional mapping between original string keys and dense ids.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RemapTable {
    keys: Vec<String>,
    index: HashMap<String, usize>,
}

impl RemapTable {
    pub fn get_or_insert(&mut self, key: &str) -> usize {
        if let Some(&id) = self.index.get(key) {
            return id;
        }
        let id = self.keys.len();
        self.keys.push(key.to_owned());
        self.index.insert(key.to_owned(), id);
        id
    }

    pub fn id(&self, key: &str) -> Option<usize> {
        self.index.get(key).copied()
    }

    pub fn key(&self, id: usize) -> Option<&str> {
        self.keys.get(id).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn write<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for (id, key) in self.keys.iter().enumerate() {
            writeln!(w, "{id}\t{key}")?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(r: R) -> Result<Self> {
        let mut table = RemapTable::default();
        for (lineno, line) in r.lines().enumerate() {
            let line = line.map_err(|e| Error::Parse {
                line: lineno + 1,
                message: e.to_string(),
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.split_whitespace();
            let (Some(id), Some(key), None) = (fields.next(), fields.next(), fields.next()) else {
                return Err(Error::Parse {
                    line: lineno + 1,
                    message: "expected `internal_id original_key`".into(),
                });
            };
            let id: usize = id.parse().map_err(|_| Error::Parse {
                line: lineno + 1,
                message: format!("bad id {id:?}"),
            })?;
            if id != table.len() {
                return Err(Error::Parse {
                    line: lineno + 1,
                    message: format!("ids must be contiguous, expected {}", table.len()),
                });
            }
            table.get_or_insert(key);
        }
        Ok(table)
    }
}

/// Result of ingesting a raw log: the dense set plus both remap tables.
#[derive(Debug, Clone)]
pub struct Ingested {
    pub set: InteractionSet,
    pub users: RemapTable,
    pub items: RemapTable,
}

impl Ingested {
    /// Writes `interactions.tsv`, `users.tsv` and `items.tsv` into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let write =
            |name: &str, f: &dyn Fn(&mut BufWriter<File>) -> std::io::Result<()>| -> Result<()> {
                let path = dir.join(name);
                let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
                let mut w = BufWriter::new(file);
                f(&mut w)
                    .and_then(|_| w.flush())
                    .map_err(|e| Error::io(&path, e))
            };
        write("users.tsv", &|w| self.users.write(w))?;
        write("items.tsv", &|w| self.items.write(w))?;
        write("interactions.tsv", &|w| {
            for it in self.set.interactions() {
                match it.timestamp {
                    Some(t) => writeln!(w, "{}\t{}\t{}", it.user, it.item, t)?,
                    None => writeln!(w, "{}\t{}", it.user, it.item)?,
                }
            }
            Ok(())
        })
    }
}

pub fn parse_line(
    line: &str,
    lineno: usize,
    has_timestamp: bool,
) -> Result<Option<RawInteraction>> {
    let trimmed = line.trim();
    if trimmed.is_empty() || trimmed.starts_with('#') {
        return Ok(None);
    }
    let fields: Vec<&str> = trimmed.split_whitespace().collect();
    let err = |message: String| Error::Parse {
        line: lineno,
        message,
    };
    let timestamp = match fields.len() {
        2 if has_timestamp => return Err(err("missing timestamp".into())),
        2 => None,
        3 => Some(
            fields[2]
                .parse::<i64>()
                .map_err(|_| err(format!("bad timestamp {:?}", fields[2])))?,
        ),
        n => return Err(err(format!("expected 2 or 3 fields, found {n}"))),
    };
    Ok(Some(RawInteraction {
        user_key: fields[0].to_owned(),
        item_key: fields[1].to_owned(),
        timestamp,
    }))
}

pub fn ingest_reader<R: BufRead>(reader: R, has_timestamp: bool) -> Result<Ingested> {
    let mut users = RemapTable::default();
    let mut items = RemapTable::default();
    let mut raw = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if let Some(r) = parse_line(&line, i + 1, has_timestamp)? {
            raw.push(Interaction {
                user: users.get_or_insert(&r.user_key),
                item: items.get_or_insert(&r.item_key),
                timestamp: r.timestamp,
            });
        }
    }
    if raw.is_empty() {
        return Err(Error::Empty("interaction file has no interactions".into()));
    }
    let set = InteractionSet::new(users.len(), items.len(), raw)?;
    Ok(Ingested { set, users, items })
}

/// Reads an interaction log and remaps keys to dense ids in order of first
/// appearance.
pub fn ingest_interactions(path: &Path, has_timestamp: bool) -> Result<Ingested> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    ingest_reader(BufReader::new(file), has_timestamp)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SplitProtocol {
    TimestampCut {
        cutoff: i64,
        val_fraction: f64,
    },
    Random {
        train: f64,
        validation: f64,
        test: f64,
    },
}

#[derive(Debug, Clone)]
pub struct Splits {
    pub train: InteractionSet,
    pub validation: InteractionSet,
    pub test: InteractionSet,
    pub protocol: SplitProtocol,
}

impl Splits {
    /// Checks pairwise disjointness against train and, for timestamp cuts,
    /// temporal ordering.
    pub fn validate(&self) -> Result<()> {
        for (name, other) in [("validation", &self.validation), ("test", &self.test)] {
            if other.n_users() != self.train.n_users() || other.n_items() != self.train.n_items() {
                return Err(Error::InvalidArgument(format!(
                    "{name} id space differs from train"
                )));
            }
            if let Some((u, i)) = other.pairs().find(|&(u, i)| self.train.contains(u, i)) {
                return Err(Error::InvalidArgument(format!(
                    "({u}, {i}) in both train and {name}"
                )));
            }
        }
        if let SplitProtocol::TimestampCut { cutoff, .. } = self.protocol {
            let bad_train = self
                .train
                .interactions()
                .iter()
                .any(|it| it.timestamp.is_none_or(|t| t > cutoff));
            let bad_test = self
                .test
                .interactions()
                .iter()
                .any(|it| it.timestamp.is_none_or(|t| t <= cutoff));
            if bad_train || bad_test {
                return Err(Error::InvalidArgument("timestamp ordering violated".into()));
            }
        }
        Ok(())
    }
}

/// Drops interactions whose user or item never appears in `train`.
fn drop_cold_start(train: &InteractionSet, held_out: Vec<Interaction>) -> Vec<Interaction> {
    let items_in_train = train.item_presence();
    held_out
        .into_iter()
        .filter(|it| !train.user_items(it.user).is_empty() && items_in_train[it.item])
        .collect()
}

/// Interactions at or before `cutoff` form train and validation (a uniform
/// random `val_fraction` of them); later ones form test.
pub fn split_by_timestamp(
    set: &InteractionSet,
    cutoff: i64,
    val_fraction: f64,
    seed: u64,
) -> Result<Splits> {
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::InvalidArgument(format!(
            "val_fraction {val_fraction} not in [0, 1)"
        )));
    }
    if !set.has_timestamps() {
        return Err(Error::InvalidArgument(
            "timestamp split requires timestamps on every interaction".into(),
        ));
    }
    let (mut before, after): (Vec<Interaction>, Vec<Interaction>) = set
        .interactions()
        .iter()
        .partition(|it| it.timestamp.is_some_and(|t| t <= cutoff));
    if before.is_empty() || after.is_empty() {
        return Err(Error::DegenerateSplit(format!(
            "cutoff {cutoff} leaves {} interactions before and {} after",
            before.len(),
            after.len()
        )));
    }
    let (train_part, val_part) = hold_out_fraction(&mut before, val_fraction, seed);
    let train = InteractionSet::new(set.n_users(), set.n_items(), train_part)?;
    let validation = InteractionSet::new(
        set.n_users(),
        set.n_items(),
        drop_cold_start(&train, val_part),
    )?;
    let test = InteractionSet::new(set.n_users(), set.n_items(), drop_cold_start(&train, after))?;
    Ok(Splits {
        train,
        validation,
        test,
        protocol: SplitProtocol::TimestampCut {
            cutoff,
            val_fraction,
        },
    })
}

/// Shuffles and moves `round(fraction · n)` interactions out. Returns
/// `(kept, held_out)` before any cold-start filtering.
fn hold_out_fraction(
    items: &mut Vec<Interaction>,
    fraction: f64,
    seed: u64,
) -> (Vec<Interaction>, Vec<Interaction>) {
    let n_out = (fraction * items.len() as f64).round() as usize;
    let mut rng = rng::stream(seed, "split-validation", &[]);
    items.shuffle(&mut rng);
    let kept = items.split_off(n_out);
    (kept, std::mem::take(items))
}

/// Per-user random partition at `(train, validation, test)` ratios. Users with
/// fewer than three interactions keep everything in train.
pub fn split_random(set: &InteractionSet, ratios: (f64, f64, f64), seed: u64) -> Result<Splits> {
    let (r_train, r_val, r_test) = ratios;
    if [r_train, r_val, r_test]
        .iter()
        .any(|r| !(0.0..=1.0).contains(r))
        || (r_train + r_val + r_test - 1.0).abs() > 1e-9
    {
        return Err(Error::InvalidArgument(format!(
            "split ratios {ratios:?} must be in [0,1] and sum to 1"
        )));
    }
    let mut train = Vec::new();
    let mut validation = Vec::new();
    let mut test = Vec::new();
    let mut by_user: Vec<Vec<Interaction>> = vec![Vec::new(); set.n_users()];
    for it in set.interactions() {
        by_user[it.user].push(*it);
    }
    for (user, mut items) in by_user.into_iter().enumerate() {
        let n = items.len();
        if n < 3 {
            train.extend(items);
            continue;
        }
        let mut rng = rng::stream(seed, "split-random", &[user as u64]);
        items.shuffle(&mut rng);
        let mut n_test = (r_test * n as f64).round() as usize;
        let mut n_val = (r_val * n as f64).round() as usize;
        while n_test + n_val >= n {
            if n_val >= n_test && n_val > 0 {
                n_val -= 1;
            } else {
                n_test -= 1;
            }
        }
        let rest = items.split_off(n_test);
        test.extend(items);
        let mut rest = rest;
        let tail = rest.split_off(n_val);
        validation.extend(rest);
        train.extend(tail);
    }
    let train = InteractionSet::new(set.n_users(), set.n_items(), train)?;
    let validation = InteractionSet::new(
        set.n_users(),
        set.n_items(),
        drop_cold_start(&train, validation),
    )?;
    let test = InteractionSet::new(set.n_users(), set.n_items(), drop_cold_start(&train, test))?;
    Ok(Splits {
        train,
        validation,
        test,
        protocol: SplitProtocol::Random {
            train: r_train,
            validation: r_val,
            test: r_test,
        },
    })
}

/// Items the user has in any of the given sets, sorted and de-duplicated.
pub fn union_items(user: usize, sets: &[&InteractionSet]) -> Vec<usize> {
    let merged: BTreeSet<usize> = sets
        .iter()
        .flat_map(|s| s.user_items(user).iter().copied())
        .collect();
    merged.into_iter().collect()
}
