//! Shared fixtures for the criterion benchmarks.

use lpo_rec_core::data::{build_splits, core_filter, generate_synthetic, MAX_SEQ_LEN, MIN_INTERACTIONS};
use lpo_rec_core::{DatasetSplits, SyntheticSpec};

/// Prepared splits of the synthetic benchmark at a given size.
pub fn synthetic_splits(num_users: usize, num_items: usize, seed: u64) -> DatasetSplits {
    let records = generate_synthetic(&SyntheticSpec {
        num_users,
        num_items,
        interactions_per_user: 20,
        zipf_exponent: 1.1,
        seed,
    })
    .expect("valid spec");
    build_splits(&core_filter(&records, MIN_INTERACTIONS), MAX_SEQ_LEN).expect("non-empty data")
}
