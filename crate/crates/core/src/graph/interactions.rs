use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{GcrError, Result};

/// One observed (or labeled) user-item record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Interaction {
    pub user: usize,
    pub item: usize,
    pub label: u8,
}

impl Interaction {
    pub fn positive(user: usize, item: usize) -> Self {
        Self {
            user,
            item,
            label: 1,
        }
    }
}

/// Input file flavour. Implicit files may omit the label column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InteractionFormat {
    Implicit,
    Labeled,
}

impl std::str::FromStr for InteractionFormat {
    type Err = GcrError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "implicit" => Ok(Self::Implicit),
            "labeled" => Ok(Self::Labeled),
            other => Err(GcrError::Config(format!("unknown format {other:?}"))),
        }
    }
}

/// A validated set of interaction records over dense user and item indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionSet {
    records: Vec<Interaction>,
    num_users: usize,
    num_items: usize,
}

impl InteractionSet {
    /// Validates index bounds, labels and pair uniqueness.
    pub fn new(records: Vec<Interaction>, num_users: usize, num_items: usize) -> Result<Self> {
        let mut seen = HashSet::with_capacity(records.len());
        let mut duplicates = 0;
        let mut first_dup = None;
        for (pos, r) in records.iter().enumerate() {
            if r.user >= num_users {
                return Err(GcrError::Index(format!(
                    "user {} out of range ({num_users} users)",
                    r.user
                )));
            }
            if r.item >= num_items {
                return Err(GcrError::Index(format!(
                    "item {} out of range ({num_items} items)",
                    r.item
                )));
            }
            if r.label > 1 {
                return Err(GcrError::Config(format!("label {} is not binary", r.label)));
            }
            if !seen.insert((r.user, r.item)) {
                duplicates += 1;
                first_dup.get_or_insert(pos + 1);
            }
        }
        if let Some(first_line) = first_dup {
            return Err(GcrError::DuplicatePairs {
                count: duplicates,
                first_line,
            });
        }
        Ok(Self {
            records,
            num_users,
            num_items,
        })
    }

    pub fn empty(num_users: usize, num_items: usize) -> Self {
        Self {
            records: Vec::new(),
            num_users,
            num_items,
        }
    }

    pub fn records(&self) -> &[Interaction] {
        &self.records
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn positives(&self) -> impl Iterator<Item = &Interaction> {
        self.records.iter().filter(|r| r.label == 1)
    }

    /// Per-user sorted lists of positively labeled items.
    pub fn positive_items_by_user(&self) -> Vec<Vec<usize>> {
        let mut lists = vec![Vec::new(); self.num_users];
        for r in self.positives() {
            lists[r.user].push(r.item);
        }
        for l in &mut lists {
            l.sort_unstable();
        }
        lists
    }

    /// Union of two disjoint record sets over the same index space.
    pub fn union(&self, other: &InteractionSet) -> Result<InteractionSet> {
        if self.num_users != other.num_users || self.num_items != other.num_items {
            return Err(GcrError::Shape("interaction sets index different spaces".into()));
        }
        let mut records = self.records.clone();
        records.extend_from_slice(&other.records);
        InteractionSet::new(records, self.num_users, self.num_items)
    }
}

/// Raw-id to dense-id mapping for users and items, in dense-id order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IdMap {
    users: Vec<String>,
    items: Vec<String>,
    user_index: HashMap<String, usize>,
    item_index: HashMap<String, usize>,
}

impl IdMap {
    fn intern(names: &mut Vec<String>, index: &mut HashMap<String, usize>, raw: &str) -> usize {
        if let Some(&id) = index.get(raw) {
            return id;
        }
        let id = names.len();
        names.push(raw.to_string());
        index.insert(raw.to_string(), id);
        id
    }

    pub fn from_names(users: Vec<String>, items: Vec<String>) -> Result<Self> {
        let mut map = IdMap::default();
        for u in users {
            if map.user_index.contains_key(&u) {
                return Err(GcrError::Format(format!("repeated user id {u:?} in id map")));
            }
            Self::intern(&mut map.users, &mut map.user_index, &u);
        }
        for i in items {
            if map.item_index.contains_key(&i) {
                return Err(GcrError::Format(format!("repeated item id {i:?} in id map")));
            }
            Self::intern(&mut map.items, &mut map.item_index, &i);
        }
        Ok(map)
    }

    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn num_items(&self) -> usize {
        self.items.len()
    }

    pub fn user_name(&self, dense: usize) -> Option<&str> {
        self.users.get(dense).map(String::as_str)
    }

    pub fn item_name(&self, dense: usize) -> Option<&str> {
        self.items.get(dense).map(String::as_str)
    }

    pub fn user_id(&self, raw: &str) -> Option<usize> {
        self.user_index.get(raw).copied()
    }

    pub fn item_id(&self, raw: &str) -> Option<usize> {
        self.item_index.get(raw).copied()
    }

    /// `raw_id<TAB>dense_id` lines for the user side.
    pub fn users_tsv(&self) -> String {
        tsv_lines(&self.users)
    }

    pub fn items_tsv(&self) -> String {
        tsv_lines(&self.items)
    }

    pub fn parse_tsv(text: &str) -> Result<Vec<String>> {
        let mut pairs = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (raw, dense) = line.split_once('\t').ok_or_else(|| GcrError::Parse {
                line: n + 1,
                message: "expected raw_id<TAB>dense_id".into(),
            })?;
            let dense: usize = dense.trim().parse().map_err(|_| GcrError::Parse {
                line: n + 1,
                message: format!("bad dense id {dense:?}"),
            })?;
            pairs.push((dense, raw.to_string()));
        }
        pairs.sort();
        for (expect, (dense, _)) in pairs.iter().enumerate() {
            if *dense != expect {
                return Err(GcrError::Format("id map dense ids are not contiguous".into()));
            }
        }
        Ok(pairs.into_iter().map(|(_, raw)| raw).collect())
    }
}

fn tsv_lines(names: &[String]) -> String {
    let mut out = String::new();
    for (dense, raw) in names.iter().enumerate() {
        let _ = writeln!(out, "{raw}\t{dense}");
    }
    out
}

/// Result of ingesting a raw TSV file.
#[derive(Debug, Clone)]
pub struct LoadedInteractions {
    pub interactions: InteractionSet,
    pub ids: IdMap,
}

struct RawRecord<'a> {
    line: usize,
    user: &'a str,
    item: &'a str,
    label: u8,
}

fn parse_lines(text: &str, format: InteractionFormat) -> Result<Vec<RawRecord<'_>>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line_no = n + 1;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let bad = |message: String| GcrError::Parse {
            line: line_no,
            message,
        };
        let label = match (fields.len(), format) {
            (2, InteractionFormat::Implicit) => 1,
            (2, InteractionFormat::Labeled) => {
                return Err(bad("labeled format requires user<TAB>item<TAB>label".into()))
            }
            (3, _) => match fields[2].trim() {
                "0" => 0,
                "1" => 1,
                other => return Err(bad(format!("label must be 0 or 1, got {other:?}"))),
            },
            (k, _) => return Err(bad(format!("expected 2 or 3 tab-separated fields, got {k}"))),
        };
        let (user, item) = (fields[0].trim(), fields[1].trim());
        if user.is_empty() || item.is_empty() {
            return Err(bad("empty user or item id".into()));
        }
        out.push(RawRecord {
            line: line_no,
            user,
            item,
            label,
        });
    }
    Ok(out)
}

fn check_duplicates(raw: &[RawRecord<'_>]) -> Result<()> {
    let mut seen = HashSet::with_capacity(raw.len());
    let mut count = 0;
    let mut first_line = 0;
    for r in raw {
        if !seen.insert((r.user, r.item)) {
            if count == 0 {
                first_line = r.line;
            }
            count += 1;
        }
    }
    if count > 0 {
        return Err(GcrError::DuplicatePairs { count, first_line });
    }
    Ok(())
}

/// Parses interaction text, assigning dense ids in order of first appearance.
pub fn parse_interactions(text: &str, format: InteractionFormat) -> Result<LoadedInteractions> {
    let raw = parse_lines(text, format)?;
    if raw.is_empty() {
        return Err(GcrError::NoInteractions);
    }
    check_duplicates(&raw)?;
    let mut ids = IdMap::default();
    let records = raw
        .iter()
        .map(|r| Interaction {
            user: IdMap::intern(&mut ids.users, &mut ids.user_index, r.user),
            item: IdMap::intern(&mut ids.items, &mut ids.item_index, r.item),
            label: r.label,
        })
        .collect();
    let interactions = InteractionSet::new(records, ids.num_users(), ids.num_items())?;
    Ok(LoadedInteractions { interactions, ids })
}

/// Reads a `user<TAB>item[<TAB>label]` file. `#` lines and blank lines are skipped.
pub fn load_interactions(path: &Path, format: InteractionFormat) -> Result<LoadedInteractions> {
    let text = fs::read_to_string(path)?;
    parse_interactions(&text, format)
}

/// Parses a split file against an existing id map. Empty files give an empty set.
pub fn parse_with_ids(text: &str, format: InteractionFormat, ids: &IdMap) -> Result<InteractionSet> {
    let raw = parse_lines(text, format)?;
    check_duplicates(&raw)?;
    let mut records = Vec::with_capacity(raw.len());
    for r in &raw {
        let user = ids.user_id(r.user).ok_or_else(|| GcrError::Parse {
            line: r.line,
            message: format!("unknown user id {:?}", r.user),
        })?;
        let item = ids.item_id(r.item).ok_or_else(|| GcrError::Parse {
            line: r.line,
            message: format!("unknown item id {:?}", r.item),
        })?;
        records.push(Interaction {
            user,
            item,
            label: r.label,
        });
    }
    InteractionSet::new(records, ids.num_users(), ids.num_items())
}

/// Writes records with raw ids, always including the label column.
pub fn format_interactions(set: &InteractionSet, ids: &IdMap) -> String {
    let mut out = String::new();
    for r in set.records() {
        let user = ids.user_name(r.user).unwrap_or("?");
        let item = ids.item_name(r.item).unwrap_or("?");
        let _ = writeln!(out, "{user}\t{item}\t{}", r.label);
    }
    out
}
