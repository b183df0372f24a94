use std::cmp::Ordering;
use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use crate::catalog::{Catalog, ItemId};

use super::{DataError, InteractionRecord};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Role {
    Train,
    Validation,
    Test,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Train => "train",
            Role::Validation => "validation",
            Role::Test => "test",
        })
    }
}

impl FromStr for Role {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Role::Train),
            "validation" => Ok(Role::Validation),
            "test" => Ok(Role::Test),
            other => Err(format!("unknown role {other:?}")),
        }
    }
}

/// A chronological history and the item that followed it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SequenceExample {
    pub history: Vec<ItemId>,
    pub target: ItemId,
    pub role: Role,
}

/// One user's reindexed interactions in chronological order.
#[derive(Clone, Debug, PartialEq)]
pub struct UserTimeline {
    pub user: String,
    pub items: Vec<ItemId>,
    pub timestamps: Vec<i64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplits {
    pub train: Vec<SequenceExample>,
    pub validation: Vec<SequenceExample>,
    pub test: Vec<SequenceExample>,
    /// Built from training interactions only.
    pub catalog: Catalog,
    /// Raw item id for each dense index.
    pub item_ids: Vec<String>,
}

/// Orders ids like `i2` before `i10`: by non-digit prefix, then by the
/// numeric value of a trailing digit run, then lexicographically.
fn natural_cmp(a: &str, b: &str) -> Ordering {
    fn split(s: &str) -> (&str, Option<u128>) {
        let cut = s.trim_end_matches(|c: char| c.is_ascii_digit()).len();
        let (prefix, digits) = s.split_at(cut);
        (prefix, digits.parse().ok())
    }
    let (pa, na) = split(a);
    let (pb, nb) = split(b);
    pa.cmp(pb).then(na.cmp(&nb)).then(a.cmp(b))
}

/// Groups records by user, sorts each user's interactions by timestamp (ties
/// keep input order) and reindexes items densely in natural id order.
pub fn user_timelines(records: &[InteractionRecord]) -> (Vec<UserTimeline>, Vec<String>) {
    let mut item_ids: Vec<String> = records.iter().map(|r| r.item.clone()).collect();
    item_ids.sort_by(|a, b| natural_cmp(a, b));
    item_ids.dedup();
    let index: HashMap<&str, usize> = item_ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();

    let mut by_user: HashMap<&str, Vec<(i64, usize)>> = HashMap::new();
    for r in records {
        by_user.entry(&r.user).or_default().push((r.timestamp, index[r.item.as_str()]));
    }
    let mut users: Vec<&str> = by_user.keys().copied().collect();
    users.sort_by(|a, b| natural_cmp(a, b));
    let timelines = users
        .into_iter()
        .map(|u| {
            let mut events = by_user.remove(u).unwrap_or_default();
            events.sort_by_key(|&(t, _)| t);
            UserTimeline {
                user: u.to_string(),
                items: events.iter().map(|&(_, i)| ItemId(i)).collect(),
                timestamps: events.iter().map(|&(t, _)| t).collect(),
            }
        })
        .collect();
    (timelines, item_ids)
}

fn window(items: &[ItemId], end: usize, max_len: usize) -> Vec<ItemId> {
    items[end.saturating_sub(max_len)..end].to_vec()
}

/// Leave-one-out split: per user the last interaction is the test target,
/// the second-to-last the validation target, and every earlier position
/// (from the second onward) a training target for its preceding prefix.
/// Histories keep at most `max_len` most recent items.
pub fn build_splits(records: &[InteractionRecord], max_len: usize) -> Result<DatasetSplits, DataError> {
    if records.is_empty() {
        return Err(DataError::EmptyAfterFilter);
    }
    let (timelines, item_ids) = user_timelines(records);
    let mut train = Vec::new();
    let mut validation = Vec::with_capacity(timelines.len());
    let mut test = Vec::with_capacity(timelines.len());
    let mut train_items = Vec::new();
    for t in &timelines {
        let n = t.items.len();
        if n < 3 {
            return Err(DataError::TooFewInteractions { user: t.user.clone(), count: n });
        }
        train_items.extend_from_slice(&t.items[..n - 2]);
        for j in 1..n - 2 {
            train.push(SequenceExample {
                history: window(&t.items, j, max_len),
                target: t.items[j],
                role: Role::Train,
            });
        }
        validation.push(SequenceExample {
            history: window(&t.items, n - 2, max_len),
            target: t.items[n - 2],
            role: Role::Validation,
        });
        test.push(SequenceExample {
            history: window(&t.items, n - 1, max_len),
            target: t.items[n - 1],
            role: Role::Test,
        });
    }
    let catalog = Catalog::build(item_ids.len(), train_items)?;
    Ok(DatasetSplits { train, validation, test, catalog, item_ids })
}

const SPLIT_FILES: [(&str, Role); 3] =
    [("train.tsv", Role::Train), ("validation.tsv", Role::Validation), ("test.tsv", Role::Test)];

impl DatasetSplits {
    pub fn examples(&self, role: Role) -> &[SequenceExample] {
        match role {
            Role::Train => &self.train,
            Role::Validation => &self.validation,
            Role::Test => &self.test,
        }
    }

    pub fn num_items(&self) -> usize {
        self.catalog.num_items()
    }

    /// Writes `train.tsv`, `validation.tsv`, `test.tsv` (each line
    /// `history,comma,joined<TAB>target<TAB>role`), `catalog.tsv` and
    /// `items.tsv` (dense index to raw id) into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), DataError> {
        std::fs::create_dir_all(dir)?;
        for (name, role) in SPLIT_FILES {
            let mut out = BufWriter::new(File::create(dir.join(name))?);
            for ex in self.examples(role) {
                let hist: Vec<String> = ex.history.iter().map(|i| i.to_string()).collect();
                writeln!(out, "{}\t{}\t{}", hist.join(","), ex.target, ex.role)?;
            }
            out.flush()?;
        }
        let mut cat = BufWriter::new(File::create(dir.join("catalog.tsv"))?);
        self.catalog.write_tsv(&mut cat)?;
        cat.flush()?;
        let mut items = BufWriter::new(File::create(dir.join("items.tsv"))?);
        for (i, raw) in self.item_ids.iter().enumerate() {
            writeln!(items, "{i}\t{raw}")?;
        }
        items.flush()?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, DataError> {
        let catalog = Catalog::read_tsv(BufReader::new(File::open(dir.join("catalog.tsv"))?))?;
        let n = catalog.num_items();
        let mut item_ids = Vec::with_capacity(n);
        for (i, line) in BufReader::new(File::open(dir.join("items.tsv"))?).lines().enumerate() {
            let line = line?;
            let raw = line
                .split_once('\t')
                .map(|(_, raw)| raw.to_string())
                .ok_or_else(|| DataError::Parse { line: i + 1, msg: "items.tsv: missing tab".into() })?;
            item_ids.push(raw);
        }
        let mut parts = Vec::new();
        for (name, role) in SPLIT_FILES {
            let file = BufReader::new(File::open(dir.join(name))?);
            parts.push(read_examples(file, role, n, name)?);
        }
        let test = parts.pop().unwrap_or_default();
        let validation = parts.pop().unwrap_or_default();
        let train = parts.pop().unwrap_or_default();
        Ok(Self { train, validation, test, catalog, item_ids })
    }
}

fn read_examples<R: BufRead>(
    input: R,
    role: Role,
    num_items: usize,
    name: &str,
) -> Result<Vec<SequenceExample>, DataError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| DataError::Parse { line: i + 1, msg: format!("{name}: {msg}") };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(err("expected 3 tab-separated fields".into()));
        }
        let item = |s: &str| -> Result<ItemId, DataError> {
            match s.parse::<usize>() {
                Ok(v) if v < num_items => Ok(ItemId(v)),
                _ => Err(err(format!("bad item {s:?}"))),
            }
        };
        let history = fields[0].split(',').map(item).collect::<Result<Vec<_>, _>>()?;
        let target = item(fields[1])?;
        let found: Role = fields[2].parse().map_err(err)?;
        if found != role {
            return Err(err(format!("role {found} in the {role} file")));
        }
        out.push(SequenceExample { history, target, role });
    }
    Ok(out)
}
