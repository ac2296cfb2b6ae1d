//! Per-client local datasets: leave-one-out hold-out, implicit positives and
//! sampled negatives.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index;
use rand::Rng;

use super::features::{extract_features, PrivateLabels, UserFeatures};
use super::movielens::{Interaction, MovieLens};
use crate::error::Result;
use crate::rng::{self, SeedTree};

/// One simulated client.
#[derive(Debug, Clone, PartialEq)]
pub struct UserShard {
    pub user_id: u32,
    /// Every item the user interacted with, including the held-out one.
    pub positives: BTreeSet<u32>,
    /// Training examples `(item, label)`; never contains `held_out_item`.
    pub examples: Vec<(u32, u8)>,
    pub features: UserFeatures,
    pub labels: PrivateLabels,
    /// `None` for users with a single interaction; they still train.
    pub held_out_item: Option<u32>,
}

impl UserShard {
    /// Items visible to the local model as graph neighbours.
    pub fn neighbors(&self) -> impl Iterator<Item = u32> + '_ {
        self.positives
            .iter()
            .copied()
            .filter(move |&v| Some(v) != self.held_out_item)
    }
}

/// Held-out item per user: latest timestamp, ties broken towards the larger
/// item id. Users with fewer than two interactions are absent.
pub fn leave_one_out_split(interactions: &[Interaction]) -> BTreeMap<u32, u32> {
    let mut best: BTreeMap<u32, (i64, u32)> = BTreeMap::new();
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for it in interactions {
        *counts.entry(it.user_id).or_default() += 1;
        let cand = (it.timestamp, it.item_id);
        best.entry(it.user_id)
            .and_modify(|b| {
                if cand > *b {
                    *b = cand;
                }
            })
            .or_insert(cand);
    }
    best.into_iter()
        .filter(|(u, _)| counts[u] >= 2)
        .map(|(u, (_, item))| (u, item))
        .collect()
}

/// Draws `q × |train_positives|` items uniformly without replacement from the
/// items the user never interacted with (fewer if that pool runs out).
pub fn sample_negatives<R: Rng + ?Sized>(
    user_id: u32,
    interacted: &BTreeSet<u32>,
    train_positive_count: usize,
    num_items: usize,
    q: usize,
    rng: &mut R,
) -> Vec<(u32, u8)> {
    let pool: Vec<u32> = (0..num_items as u32)
        .filter(|v| !interacted.contains(v))
        .collect();
    if pool.is_empty() {
        log::warn!("user {user_id}: no items left to sample negatives from");
        return Vec::new();
    }
    let want = (q * train_positive_count).min(pool.len());
    index::sample(rng, pool.len(), want)
        .into_iter()
        .map(|i| (pool[i], 0u8))
        .collect()
}

/// Builds every client's shard. Negatives are drawn once, from the
/// `negatives/<user>` substream.
pub fn build_shards(data: &MovieLens, q: usize, seeds: &SeedTree) -> Result<Vec<UserShard>> {
    let held_out = leave_one_out_split(&data.interactions);
    let per_user = data.by_user();
    let max_count = per_user.iter().map(Vec::len).max().unwrap_or(0);

    let mut shards = Vec::with_capacity(per_user.len());
    for (user, rows) in per_user.iter().enumerate() {
        let user_id = user as u32;
        if rows.is_empty() {
            continue;
        }
        let profile = &data.profiles[user];
        let ratings: Vec<u8> = rows.iter().map(|r| r.rating).collect();
        let features = extract_features(&ratings, profile, max_count)?;
        let positives: BTreeSet<u32> = rows.iter().map(|r| r.item_id).collect();
        let hold = held_out.get(&user_id).copied();

        let mut examples: Vec<(u32, u8)> = positives
            .iter()
            .copied()
            .filter(|&v| Some(v) != hold)
            .map(|v| (v, 1u8))
            .collect();
        let mut rng = seeds.stream(rng::NEGATIVES, &[u64::from(user_id)]);
        let negatives = sample_negatives(
            user_id,
            &positives,
            examples.len(),
            data.num_items(),
            q,
            &mut rng,
        );
        examples.extend(negatives);

        shards.push(UserShard {
            user_id,
            positives,
            examples,
            features,
            labels: PrivateLabels::from_profile(profile),
            held_out_item: hold,
        });
    }
    Ok(shards)
}
