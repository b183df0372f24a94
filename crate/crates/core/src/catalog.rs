//! Item universe and the popularity-based head/tail partition.

use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Fraction of the catalog (rounded up) assigned to the head set.
pub const HEAD_FRACTION: f64 = 0.2;

/// Dense item index in `0..num_items`. The value `num_items` itself is the
/// padding slot of the embedding table and never names a real item.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ItemId(pub usize);

impl ItemId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for ItemId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("no interactions to build a catalog from")]
    EmptyInput,
    #[error("item {item} out of range for a catalog of {num_items} items")]
    OutOfRange { item: usize, num_items: usize },
    #[error("catalog file line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Items with their interaction counts, split into a head set (the most
/// popular `ceil(0.2 * n)` items) and a tail set (everything else).
#[derive(Clone, Debug, PartialEq)]
pub struct Catalog {
    popularity: Vec<u64>,
    /// Head items, most popular first.
    head: Vec<ItemId>,
    tail_flags: Vec<bool>,
}

/// `ceil(0.2 * num_items)`, computed in integers.
pub fn head_size(num_items: usize) -> usize {
    num_items.div_ceil(5)
}

impl Catalog {
    /// Counts occurrences of each item in `items` over a universe of
    /// `num_items` ids.
    pub fn build<I>(num_items: usize, items: I) -> Result<Self, CatalogError>
    where
        I: IntoIterator<Item = ItemId>,
    {
        let mut counts = vec![0u64; num_items];
        let mut any = false;
        for item in items {
            let slot = counts.get_mut(item.0).ok_or(CatalogError::OutOfRange { item: item.0, num_items })?;
            *slot += 1;
            any = true;
        }
        if !any {
            return Err(CatalogError::EmptyInput);
        }
        Self::from_counts(counts)
    }

    /// Partitions items given their popularity counts. Items are ranked by
    /// descending count with ties broken by ascending id.
    pub fn from_counts(popularity: Vec<u64>) -> Result<Self, CatalogError> {
        if popularity.is_empty() {
            return Err(CatalogError::EmptyInput);
        }
        let n = popularity.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| popularity[b].cmp(&popularity[a]).then(a.cmp(&b)));
        let head: Vec<ItemId> = order[..head_size(n)].iter().map(|&i| ItemId(i)).collect();
        let mut tail_flags = vec![true; n];
        for h in &head {
            tail_flags[h.0] = false;
        }
        Ok(Self { popularity, head, tail_flags })
    }

    pub fn num_items(&self) -> usize {
        self.popularity.len()
    }

    /// Embedding-table index reserved for padding.
    pub fn padding_id(&self) -> ItemId {
        ItemId(self.num_items())
    }

    pub fn popularity(&self) -> &[u64] {
        &self.popularity
    }

    /// Head items, most popular first.
    pub fn head(&self) -> &[ItemId] {
        &self.head
    }

    /// Tail items in ascending id order.
    pub fn tail(&self) -> Vec<ItemId> {
        (0..self.num_items()).filter(|&i| self.tail_flags[i]).map(ItemId).collect()
    }

    pub fn num_tail(&self) -> usize {
        self.num_items() - self.head.len()
    }

    pub fn is_tail(&self, item: ItemId) -> Result<bool, CatalogError> {
        self.tail_flags
            .get(item.0)
            .copied()
            .ok_or(CatalogError::OutOfRange { item: item.0, num_items: self.num_items() })
    }

    /// Per-item tail flags indexed by id.
    pub fn tail_flags(&self) -> &[bool] {
        &self.tail_flags
    }

    /// Writes `item_id<TAB>count<TAB>H|T`, one line per item, by id.
    pub fn write_tsv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for (i, count) in self.popularity.iter().enumerate() {
            let tag = if self.tail_flags[i] { 'T' } else { 'H' };
            writeln!(out, "{i}\t{count}\t{tag}")?;
        }
        Ok(())
    }

    /// Reads the format written by [`Catalog::write_tsv`]. The stored H/T
    /// tags must agree with the partition recomputed from the counts.
    pub fn read_tsv<R: BufRead>(input: R) -> Result<Self, CatalogError> {
        let mut counts = Vec::new();
        let mut tags = Vec::new();
        for (i, line) in input.lines().enumerate() {
            let line = line?;
            let lineno = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let parse = |msg: &str| CatalogError::Parse { line: lineno, msg: msg.to_string() };
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(parse("expected 3 tab-separated fields"));
            }
            let id: usize = fields[0].parse().map_err(|_| parse("bad item id"))?;
            if id != counts.len() {
                return Err(parse("item ids must be contiguous and sorted"));
            }
            counts.push(fields[1].parse::<u64>().map_err(|_| parse("bad count"))?);
            tags.push(match fields[2] {
                "H" => false,
                "T" => true,
                _ => return Err(parse("tag must be H or T")),
            });
        }
        let catalog = Self::from_counts(counts)?;
        if let Some(i) = (0..tags.len()).find(|&i| tags[i] != catalog.tail_flags[i]) {
            return Err(CatalogError::Parse {
                line: i + 1,
                msg: "head/tail tag disagrees with the popularity ranking".into(),
            });
        }
        Ok(catalog)
    }
}
