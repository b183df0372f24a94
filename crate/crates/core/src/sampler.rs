//! Negative sampling from the head items.

use std::fmt;
use std::str::FromStr;

use rand::distributions::Open01;
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{Catalog, ItemId};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SamplerError {
    #[error("need {needed} negatives but only {available} head items remain after excluding the target")]
    NotEnoughCandidates { needed: usize, available: usize },
    #[error("invalid sampling strategy: {0}")]
    InvalidStrategy(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    /// Gumbel-perturbed scores, top K: K draws without replacement from
    /// the softmax over candidate scores.
    AdaptiveGumbel,
    /// The K highest raw scores, ties to the smaller id.
    TopkSelect,
    /// K distinct candidates uniformly at random.
    UniformRandom,
}

impl SamplerKind {
    pub const ALL: [SamplerKind; 3] =
        [SamplerKind::AdaptiveGumbel, SamplerKind::TopkSelect, SamplerKind::UniformRandom];

    pub fn name(self) -> &'static str {
        match self {
            SamplerKind::AdaptiveGumbel => "adaptive_gumbel",
            SamplerKind::TopkSelect => "topk_select",
            SamplerKind::UniformRandom => "uniform_random",
        }
    }
}

impl fmt::Display for SamplerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SamplerKind {
    type Err = SamplerError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| SamplerError::InvalidStrategy(format!("unknown sampler kind {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingStrategy {
    pub kind: SamplerKind,
    pub k: usize,
    pub gumbel_scale: f64,
}

impl Default for SamplingStrategy {
    fn default() -> Self {
        Self { kind: SamplerKind::AdaptiveGumbel, k: 10, gumbel_scale: 1.0 }
    }
}

impl SamplingStrategy {
    pub fn validate(&self) -> Result<(), SamplerError> {
        if self.k == 0 {
            return Err(SamplerError::InvalidStrategy("k must be at least 1".into()));
        }
        if !(self.gumbel_scale > 0.0 && self.gumbel_scale.is_finite()) {
            return Err(SamplerError::InvalidStrategy(format!(
                "gumbel scale must be positive, got {}",
                self.gumbel_scale
            )));
        }
        Ok(())
    }

    /// Checks that `k` negatives can always be drawn, even for a head target.
    pub fn validate_for(&self, catalog: &Catalog) -> Result<(), SamplerError> {
        self.validate()?;
        let available = catalog.head().len().saturating_sub(1);
        if self.k > available {
            return Err(SamplerError::NotEnoughCandidates { needed: self.k, available });
        }
        Ok(())
    }
}

/// Head items other than the target, in head order.
fn candidates(catalog: &Catalog, target: ItemId) -> Vec<ItemId> {
    catalog.head().iter().copied().filter(|&h| h != target).collect()
}

/// A Gumbel(0, scale) draw, `-scale * ln(-ln u)` with `u` uniform in (0, 1).
pub fn gumbel_noise<R: Rng + ?Sized>(rng: &mut R, scale: f64) -> f64 {
    let u: f64 = rng.sample(Open01);
    -scale * (-u.ln()).ln()
}

/// Indices of the `k` largest values, largest first, ties to the smaller
/// item id.
fn top_k(cands: &[ItemId], keys: &[f64], k: usize) -> Vec<ItemId> {
    let mut order: Vec<usize> = (0..cands.len()).collect();
    let cmp = |&a: &usize, &b: &usize| keys[b].total_cmp(&keys[a]).then(cands[a].cmp(&cands[b]));
    if k < order.len() {
        order.select_nth_unstable_by(k, cmp);
        order.truncate(k);
    }
    order.sort_unstable_by(cmp);
    order.into_iter().map(|i| cands[i]).collect()
}

/// Gumbel-Top-K with caller-supplied noise, called once per candidate in
/// candidate order.
pub fn gumbel_top_k_with<F: FnMut() -> f64>(
    scores: &[f64],
    catalog: &Catalog,
    target: ItemId,
    k: usize,
    mut noise: F,
) -> Result<Vec<ItemId>, SamplerError> {
    let cands = candidates(catalog, target);
    check_room(k, cands.len())?;
    let keys: Vec<f64> = cands.iter().map(|c| scores[c.0] + noise()).collect();
    Ok(top_k(&cands, &keys, k))
}

fn check_room(k: usize, available: usize) -> Result<(), SamplerError> {
    if k > available {
        Err(SamplerError::NotEnoughCandidates { needed: k, available })
    } else {
        Ok(())
    }
}

/// Draws `strategy.k` distinct head negatives for one example. The target is
/// never a candidate; other history items are.
pub fn sample_negatives<R: Rng + ?Sized>(
    scores: &[f64],
    catalog: &Catalog,
    target: ItemId,
    strategy: &SamplingStrategy,
    rng: &mut R,
) -> Result<Vec<ItemId>, SamplerError> {
    strategy.validate()?;
    if scores.len() != catalog.num_items() {
        return Err(SamplerError::InvalidStrategy(format!(
            "{} scores for {} items",
            scores.len(),
            catalog.num_items()
        )));
    }
    let k = strategy.k;
    match strategy.kind {
        SamplerKind::AdaptiveGumbel => {
            let scale = strategy.gumbel_scale;
            gumbel_top_k_with(scores, catalog, target, k, || gumbel_noise(rng, scale))
        }
        SamplerKind::TopkSelect => gumbel_top_k_with(scores, catalog, target, k, || 0.0),
        SamplerKind::UniformRandom => {
            let cands = candidates(catalog, target);
            check_room(k, cands.len())?;
            Ok(index::sample(rng, cands.len(), k).into_iter().map(|i| cands[i]).collect())
        }
    }
}

/// Softmax of candidate scores over the head items other than the target.
pub fn sampling_distribution(
    scores: &[f64],
    catalog: &Catalog,
    target: ItemId,
) -> Result<Vec<(ItemId, f64)>, SamplerError> {
    let cands = candidates(catalog, target);
    check_room(1, cands.len())?;
    let max = cands.iter().map(|c| scores[c.0]).fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = cands.iter().map(|c| (scores[c.0] - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(cands.into_iter().zip(exps).map(|(c, e)| (c, e / z)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::{HashMap, HashSet};

    /// 100 items with strictly decreasing popularity: items 0..20 are head.
    fn catalog100() -> Catalog {
        Catalog::from_counts((0..100u64).rev().collect()).unwrap()
    }

    fn strategy(kind: SamplerKind, k: usize) -> SamplingStrategy {
        SamplingStrategy { kind, k, gumbel_scale: 1.0 }
    }

    fn random_scores(seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..100).map(|_| rng.gen_range(-2.0..2.0)).collect()
    }

    #[test]
    fn zero_noise_equals_topk_select() {
        let cat = catalog100();
        for seed in 0..5 {
            let s = random_scores(seed);
            for target in [ItemId(3), ItemId(50)] {
                let a = gumbel_top_k_with(&s, &cat, target, 6, || 0.0).unwrap();
                let b = sample_negatives(
                    &s,
                    &cat,
                    target,
                    &strategy(SamplerKind::TopkSelect, 6),
                    &mut ChaCha8Rng::seed_from_u64(0),
                )
                .unwrap();
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn topk_breaks_ties_by_id() {
        let cat = catalog100();
        let s = vec![1.0; 100];
        let got = sample_negatives(
            &s,
            &cat,
            ItemId(1),
            &strategy(SamplerKind::TopkSelect, 3),
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        assert_eq!(got, vec![ItemId(0), ItemId(2), ItemId(3)]);
    }

    #[test]
    fn single_draw_frequencies_match_softmax() {
        let cat = catalog100();
        let s = random_scores(9);
        let target = ItemId(70);
        let dist = sampling_distribution(&s, &cat, target).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let mut counts: HashMap<ItemId, f64> = HashMap::new();
        let trials = 100_000;
        for _ in 0..trials {
            let n = sample_negatives(&s, &cat, target, &strategy(SamplerKind::AdaptiveGumbel, 1), &mut rng).unwrap();
            *counts.entry(n[0]).or_default() += 1.0;
        }
        let tv: f64 =
            dist.iter().map(|(i, p)| (counts.get(i).copied().unwrap_or(0.0) / trials as f64 - p).abs()).sum::<f64>()
                / 2.0;
        assert!(tv < 0.02, "total variation {tv}");
    }

    #[test]
    fn raising_a_score_does_not_lower_its_frequency() {
        let cat = catalog100();
        let base = random_scores(4);
        let item = ItemId(7);
        let freq = |bump: f64, seed: u64| {
            let mut s = base.clone();
            s[item.0] += bump;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..50_000)
                .filter(|_| {
                    sample_negatives(&s, &cat, ItemId(60), &strategy(SamplerKind::AdaptiveGumbel, 3), &mut rng)
                        .unwrap()
                        .contains(&item)
                })
                .count()
        };
        let (lo, hi) = (freq(0.0, 1), freq(0.5, 2));
        assert!(hi >= lo, "{hi} < {lo}");
    }

    #[test]
    fn same_seed_same_negatives() {
        let cat = catalog100();
        let s = random_scores(1);
        for kind in SamplerKind::ALL {
            let draw = |seed| {
                sample_negatives(&s, &cat, ItemId(2), &strategy(kind, 5), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
            };
            assert_eq!(draw(8), draw(8));
        }
    }

    #[test]
    fn not_enough_candidates() {
        let cat = catalog100();
        let s = random_scores(0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for kind in SamplerKind::ALL {
            let err = sample_negatives(&s, &cat, ItemId(4), &strategy(kind, 20), &mut rng).unwrap_err();
            assert_eq!(err, SamplerError::NotEnoughCandidates { needed: 20, available: 19 });
        }
        // A tail target leaves all 20 head items available.
        assert!(sample_negatives(&s, &cat, ItemId(40), &strategy(SamplerKind::TopkSelect, 20), &mut rng).is_ok());
        assert!(strategy(SamplerKind::TopkSelect, 20).validate_for(&cat).is_err());
        assert!(strategy(SamplerKind::TopkSelect, 19).validate_for(&cat).is_ok());
    }

    #[test]
    fn invalid_strategies() {
        assert!(strategy(SamplerKind::AdaptiveGumbel, 0).validate().is_err());
        let mut s = strategy(SamplerKind::AdaptiveGumbel, 2);
        s.gumbel_scale = 0.0;
        assert!(s.validate().is_err());
        assert!("gumbel".parse::<SamplerKind>().is_err());
        for k in SamplerKind::ALL {
            assert_eq!(k.name().parse::<SamplerKind>().unwrap(), k);
        }
    }

    #[test]
    fn distribution_examples() {
        let cat = catalog100();
        let d = sampling_distribution(&[0.5; 100], &cat, ItemId(90)).unwrap();
        assert!(d.iter().all(|&(_, p)| (p - 1.0 / 20.0).abs() < 1e-15));
        let mut s = vec![0.0; 100];
        s[5] = 10.0;
        let d = sampling_distribution(&s, &cat, ItemId(0)).unwrap();
        assert_eq!(d.len(), 19);
        assert!(d.iter().find(|(i, _)| *i == ItemId(5)).unwrap().1 > 0.99);
    }

    proptest! {
        #[test]
        fn negatives_are_distinct_head_items_without_target(
            seed in any::<u64>(),
            target in 0usize..100,
            k in 1usize..=19,
            kind in proptest::sample::select(SamplerKind::ALL.to_vec()),
        ) {
            let cat = catalog100();
            let s = random_scores(seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let negs = sample_negatives(&s, &cat, ItemId(target), &strategy(kind, k), &mut rng).unwrap();
            let head: HashSet<_> = cat.head().iter().copied().collect();
            prop_assert_eq!(negs.len(), k);
            prop_assert_eq!(negs.iter().collect::<HashSet<_>>().len(), k);
            prop_assert!(negs.iter().all(|n| head.contains(n) && n.0 != target));
        }

        #[test]
        fn distribution_sums_to_one(seed in any::<u64>(), target in 0usize..100) {
            let d = sampling_distribution(&random_scores(seed), &catalog100(), ItemId(target)).unwrap();
            prop_assert!((d.iter().map(|p| p.1).sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
