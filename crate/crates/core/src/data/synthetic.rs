use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DataError, InteractionRecord};

const CLUSTERS: usize = 10;
/// Probability that a draw comes from the user's own cluster.
const CLUSTER_AFFINITY: f64 = 0.7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_users: usize,
    pub num_items: usize,
    pub interactions_per_user: usize,
    pub zipf_exponent: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    fn validate(&self) -> Result<(), DataError> {
        if self.num_users == 0 || self.num_items == 0 || self.interactions_per_user == 0 {
            return Err(DataError::InvalidSpec("user, item and per-user counts must all be at least 1".into()));
        }
        if !(self.zipf_exponent > 0.0 && self.zipf_exponent.is_finite()) {
            return Err(DataError::InvalidSpec(format!("zipf exponent must be positive, got {}", self.zipf_exponent)));
        }
        Ok(())
    }
}

/// Generates interactions whose item popularity follows `rank^-s`, with item
/// `i` holding rank `i + 1`.
///
/// Items are dealt round-robin into clusters and every user has a preferred
/// cluster. Each draw picks a cluster (the user's own with probability
/// `CLUSTER_AFFINITY`, otherwise one at random) and then an item inside it.
/// Cluster choices and user preferences are both weighted by cluster mass, so
/// the marginal item distribution stays exactly Zipf while histories still
/// predict future items.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<InteractionRecord>, DataError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let clusters = CLUSTERS.min(spec.num_items);
    let weights: Vec<f64> = (0..spec.num_items).map(|i| ((i + 1) as f64).powf(-spec.zipf_exponent)).collect();

    let members: Vec<Vec<usize>> = (0..clusters).map(|c| (c..spec.num_items).step_by(clusters).collect()).collect();
    let within: Vec<WeightedIndex<f64>> = members
        .iter()
        .map(|m| WeightedIndex::new(m.iter().map(|&i| weights[i])).expect("clusters are non-empty"))
        .collect();
    let mass: Vec<f64> = members.iter().map(|m| m.iter().map(|&i| weights[i]).sum()).collect();
    let pick_cluster = WeightedIndex::new(&mass).expect("positive cluster mass");

    let mut records = Vec::with_capacity(spec.num_users * spec.interactions_per_user);
    for u in 0..spec.num_users {
        let home = pick_cluster.sample(&mut rng);
        let mut t: i64 = 0;
        for _ in 0..spec.interactions_per_user {
            let c = if rng.gen_bool(CLUSTER_AFFINITY) { home } else { pick_cluster.sample(&mut rng) };
            let item = members[c][within[c].sample(&mut rng)];
            t += rng.gen_range(1..=3600);
            records.push(InteractionRecord::new(format!("u{u}"), format!("i{item}"), t));
        }
    }
    Ok(records)
}
