//! Small generated datasets in ML-100K text form, for smoke runs and
//! self-checks without a download.

use std::fmt::Write;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::movielens::{parse_movielens, DataFormat, MovieLens, NUM_OCCUPATIONS, ML100K_OCCUPATIONS};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub users: usize,
    pub items: usize,
    pub min_per_user: usize,
    pub max_per_user: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            users: 20,
            items: 60,
            min_per_user: 5,
            max_per_user: 15,
        }
    }
}

/// Returns `(ratings, profiles)` file contents. Users of each gender lean
/// towards their own half of the catalogue, so attributes are learnable.
pub fn synthetic_text<R: Rng + ?Sized>(spec: &SyntheticSpec, rng: &mut R) -> Result<(String, String)> {
    if spec.users < 2 || spec.items < 4 || spec.min_per_user < 2 || spec.min_per_user > spec.max_per_user || spec.max_per_user > spec.items {
        return Err(Error::Config(format!("unusable synthetic dataset shape {spec:?}")));
    }
    let mut ratings = String::new();
    let mut profiles = String::new();
    let half = spec.items / 2;
    for u in 1..=spec.users {
        // both genders appear at least once
        let male = if u <= 2 { u == 1 } else { rng.random_bool(0.6) };
        let age = rng.random_range(18..65u32);
        let occupation = ML100K_OCCUPATIONS[rng.random_range(0..NUM_OCCUPATIONS)];
        writeln!(profiles, "{u}|{age}|{}|{occupation}|00000", if male { "M" } else { "F" }).expect("string write");

        let n = rng.random_range(spec.min_per_user..=spec.max_per_user);
        let own = n * 3 / 4;
        let (lo, hi) = if male { (0, half) } else { (half, spec.items) };
        let mut picked: Vec<usize> = index::sample(rng, hi - lo, own.min(hi - lo)).into_iter().map(|i| i + lo).collect();
        let rest: Vec<usize> = (0..spec.items).filter(|i| !(lo..hi).contains(i)).collect();
        let extra = (n - picked.len()).min(rest.len());
        picked.extend(index::sample(rng, rest.len(), extra).into_iter().map(|i| rest[i]));
        for (t, item) in picked.into_iter().enumerate() {
            let rating = if male { rng.random_range(3..=5u8) } else { rng.random_range(1..=4u8) };
            writeln!(ratings, "{u}\t{}\t{rating}\t{}", item + 1, 880_000_000 + t as i64 * 60).expect("string write");
        }
    }
    Ok((ratings, profiles))
}

pub fn synthetic_movielens<R: Rng + ?Sized>(spec: &SyntheticSpec, rng: &mut R) -> Result<MovieLens> {
    let (ratings, profiles) = synthetic_text(spec, rng)?;
    parse_movielens(&ratings, &profiles, DataFormat::Ml100k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn shape_and_determinism() {
        let spec = SyntheticSpec::default();
        let a = synthetic_text(&spec, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = synthetic_text(&spec, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, b);
        let data = synthetic_movielens(&spec, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(data.num_users(), 20);
        for rows in data.by_user() {
            assert!((5..=15).contains(&rows.len()));
        }
        assert!(synthetic_text(&SyntheticSpec { users: 1, ..spec }, &mut ChaCha8Rng::seed_from_u64(1)).is_err());
    }
}
