//! Leave-one-out Hit@K over the full never-interacted catalogue.

use std::collections::BTreeSet;

use rayon::prelude::*;

use crate::dataset::UserShard;
use crate::error::{Error, Result};
use crate::recommender::{CatalogScorer, ItemFeatureTable, ParamSet, UserContext};

/// Rank of `held_out` among itself and every item outside `positives`:
/// the number of candidates scoring at least as high. Ties count against
/// the held-out item.
pub fn held_out_rank(logits: &[f64], positives: &BTreeSet<u32>, held_out: u32) -> usize {
    let target = logits[held_out as usize];
    logits
        .iter()
        .enumerate()
        .filter(|&(v, &s)| v as u32 != held_out && !positives.contains(&(v as u32)) && s >= target)
        .count()
}

pub fn hit_from_logits(logits: &[f64], positives: &BTreeSet<u32>, held_out: u32, k: usize) -> bool {
    held_out_rank(logits, positives, held_out) < k
}

/// `None` when the shard has no held-out item.
pub fn hit_at_k(params: &ParamSet, items: &ItemFeatureTable, shard: &UserShard, k: usize) -> Result<Option<bool>> {
    let Some(held_out) = shard.held_out_item else {
        return Ok(None);
    };
    let scorer = CatalogScorer::new(params, items)?;
    let ctx = UserContext::new(shard.features.as_slice(), shard.neighbors(), items);
    Ok(Some(hit_from_logits(&scorer.logits(&ctx), &shard.positives, held_out, k)))
}

/// Held-out ranks of every evaluable shard, in shard order.
pub fn held_out_ranks(params: &ParamSet, items: &ItemFeatureTable, shards: &[UserShard]) -> Result<Vec<usize>> {
    let scorer = CatalogScorer::new(params, items)?;
    Ok(shards
        .par_iter()
        .filter_map(|s| {
            let held_out = s.held_out_item?;
            let ctx = UserContext::new(s.features.as_slice(), s.neighbors(), items);
            Some(held_out_rank(&scorer.logits(&ctx), &s.positives, held_out))
        })
        .collect())
}

/// Mean Hit@K for each requested K.
pub fn hit_rates(ranks: &[usize], ks: &[usize]) -> Result<Vec<(usize, f64)>> {
    if ranks.is_empty() {
        return Err(Error::Data("no user has a held-out item".into()));
    }
    Ok(ks
        .iter()
        .map(|&k| (k, ranks.iter().filter(|&&r| r < k).count() as f64 / ranks.len() as f64))
        .collect())
}

pub fn evaluate_recommender(params: &ParamSet, items: &ItemFeatureTable, shards: &[UserShard], k: usize) -> Result<f64> {
    let ranks = held_out_ranks(params, items, shards)?;
    Ok(hit_rates(&ranks, &[k])?[0].1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn set(v: &[u32]) -> BTreeSet<u32> {
        v.iter().copied().collect()
    }

    #[test]
    fn unique_max_and_min() {
        let logits = [0.1, 0.9, 0.3, 0.2, 0.0];
        let pos = set(&[1]);
        assert!(hit_from_logits(&logits, &pos, 1, 1));
        let pos = set(&[4]);
        assert!(!hit_from_logits(&logits, &pos, 4, 4));
    }

    #[test]
    fn toy_ranking_matches_brute_force() {
        let logits = [0.5, 0.2, 0.8, 0.2, 0.6];
        let pos = set(&[1, 2]);
        // candidates: 0, 1 (held out), 3, 4
        for k in 1..=4 {
            let mut cands: Vec<(f64, bool)> = [0u32, 1, 3, 4].iter().map(|&v| (logits[v as usize], v == 1)).collect();
            // pessimistic: held-out sorts after equal scores
            cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let pos_of = cands.iter().position(|c| c.1).unwrap();
            assert_eq!(hit_from_logits(&logits, &pos, 1, k), pos_of < k, "k={k}");
        }
        assert!(!hit_from_logits(&logits, &pos, 1, 2));
        // the tie with item 3 counts against it
        assert!(!hit_from_logits(&logits, &pos, 1, 3));
        assert!(hit_from_logits(&logits, &pos, 1, 4));
    }

    #[test]
    fn rate_examples() {
        assert_eq!(hit_rates(&[0, 0, 3], &[1]).unwrap(), vec![(1, 2.0 / 3.0)]);
        assert_eq!(hit_rates(&[0, 5], &[2]).unwrap(), vec![(2, 0.5)]);
        assert_eq!(hit_rates(&[0, 1], &[5]).unwrap(), vec![(5, 1.0)]);
        assert!(hit_rates(&[], &[5]).is_err());
    }

    proptest! {
        #[test]
        fn hit_monotone_in_k(logits in prop::collection::vec(-5.0f64..5.0, 3..40), seed in 0usize..1000) {
            let held = (seed % logits.len()) as u32;
            let pos = set(&[held]);
            let mut last = false;
            for k in 1..=logits.len() {
                let h = hit_from_logits(&logits, &pos, held, k);
                prop_assert!(h || !last);
                last = h;
            }
        }

        #[test]
        fn rates_ignore_order(mut ranks in prop::collection::vec(0usize..50, 1..30), k in 1usize..40) {
            let a = hit_rates(&ranks, &[k]).unwrap();
            ranks.reverse();
            prop_assert_eq!(a, hit_rates(&ranks, &[k]).unwrap());
        }
    }
}
