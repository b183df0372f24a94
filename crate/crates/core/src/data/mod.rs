//! Interaction logs, k-core filtering, leave-one-out splits and a synthetic
//! Zipf-law generator.

mod filter;
mod parse;
mod splits;
mod synthetic;

pub use filter::core_filter;
pub use parse::{parse_interactions, write_interactions};
pub use splits::{build_splits, user_timelines, DatasetSplits, Role, SequenceExample, UserTimeline};
pub use synthetic::{generate_synthetic, SyntheticSpec};

use thiserror::Error;

use crate::catalog::CatalogError;

/// Default k for the k-core filter.
pub const MIN_INTERACTIONS: usize = 5;
/// Default maximum history length.
pub const MAX_SEQ_LEN: usize = 10;

/// One user-item interaction with raw identifiers.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct InteractionRecord {
    pub user: String,
    pub item: String,
    pub timestamp: i64,
}

impl InteractionRecord {
    pub fn new(user: impl Into<String>, item: impl Into<String>, timestamp: i64) -> Self {
        Self { user: user.into(), item: item.into(), timestamp }
    }
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("user {user} has {count} interactions; at least 3 are required")]
    TooFewInteractions { user: String, count: usize },
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("no interactions left after filtering")]
    EmptyAfterFilter,
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
