use std::collections::HashMap;

use super::InteractionRecord;

/// Iteratively drops users, then items, with fewer than `min_count`
/// interactions until nothing changes (the k-core). Survivors keep their
/// input order.
pub fn core_filter(records: &[InteractionRecord], min_count: usize) -> Vec<InteractionRecord> {
    let mut alive = vec![true; records.len()];
    loop {
        let users = drop_sparse(records, &mut alive, min_count, |r| r.user.as_str());
        let items = drop_sparse(records, &mut alive, min_count, |r| r.item.as_str());
        if !users && !items {
            break;
        }
    }
    records.iter().zip(&alive).filter(|(_, &a)| a).map(|(r, _)| r.clone()).collect()
}

fn drop_sparse<'a>(
    records: &'a [InteractionRecord],
    alive: &mut [bool],
    min_count: usize,
    key: impl Fn(&'a InteractionRecord) -> &'a str,
) -> bool {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for (r, _) in records.iter().zip(alive.iter()).filter(|(_, &a)| a) {
        *counts.entry(key(r)).or_default() += 1;
    }
    let mut changed = false;
    for (r, a) in records.iter().zip(alive.iter_mut()) {
        if *a && counts[key(r)] < min_count {
            *a = false;
            changed = true;
        }
    }
    changed
}
