//! Per-user feature vectors and private labels.
//!
//! Layout of the 44-wide vector:
//!
//! | slots    | content                                                  |
//! |----------|----------------------------------------------------------|
//! | 0        | interaction count / dataset max per-user count           |
//! | 1..6     | count per rating level 1..5 / dataset max per-user count |
//! | 6..11    | share of ratings per level 1..5                          |
//! | 11, 12   | share of high (4, 5) and low (1, 2) ratings              |
//! | 13       | rating entropy in nats                                   |
//! | 14..18   | median, min, max, mean rating, each divided by 5         |
//! | 18..20   | gender one-hot (F, M)                                    |
//! | 20..41   | occupation one-hot                                       |
//! | 41..44   | age-group one-hot                                        |

use serde::{Deserialize, Serialize};

use super::movielens::{Gender, UserProfile, NUM_OCCUPATIONS};
use crate::error::{Error, Result};

pub const FEATURE_DIM: usize = 44;

pub const SLOT_COUNT: usize = 0;
pub const SLOT_LEVEL_COUNTS: usize = 1;
pub const SLOT_LEVEL_SHARES: usize = 6;
pub const SLOT_HIGH_SHARE: usize = 11;
pub const SLOT_LOW_SHARE: usize = 12;
pub const SLOT_ENTROPY: usize = 13;
pub const SLOT_MEDIAN: usize = 14;
pub const SLOT_MIN: usize = 15;
pub const SLOT_MAX: usize = 16;
pub const SLOT_MEAN: usize = 17;
pub const SLOT_GENDER: usize = 18;
pub const SLOT_OCCUPATION: usize = 20;
pub const SLOT_AGE: usize = 41;

pub const AGE_CLASSES: usize = 3;
pub const GENDER_CLASSES: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserFeatures(Vec<f64>);

impl UserFeatures {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Attribute {
    Gender,
    Age,
}

impl Attribute {
    pub fn classes(self) -> usize {
        match self {
            Attribute::Gender => GENDER_CLASSES,
            Attribute::Age => AGE_CLASSES,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Attribute::Gender => "gender",
            Attribute::Age => "age",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PrivateLabels {
    pub age_group: usize,
    pub gender: usize,
}

impl PrivateLabels {
    pub fn from_profile(profile: &UserProfile) -> Self {
        Self {
            age_group: age_bucket(profile.age),
            gender: profile.gender.index(),
        }
    }

    pub fn get(&self, attribute: Attribute) -> usize {
        match attribute {
            Attribute::Gender => self.gender,
            Attribute::Age => self.age_group,
        }
    }
}

/// Age groups `[0, 35)`, `[35, 45]`, `(45, ∞)`.
pub fn age_bucket(age: u32) -> usize {
    if age < 35 {
        0
    } else if age <= 45 {
        1
    } else {
        2
    }
}

/// Shannon entropy (nats) of the rating-level distribution.
pub fn rating_entropy(level_counts: &[usize; 5]) -> Result<f64> {
    let total: usize = level_counts.iter().sum();
    if total == 0 {
        return Err(Error::Data("rating entropy of an empty distribution".into()));
    }
    let total = total as f64;
    Ok(level_counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total;
            -p * p.ln()
        })
        .sum())
}

fn median(sorted: &[u8]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        f64::from(sorted[n / 2])
    } else {
        (f64::from(sorted[n / 2 - 1]) + f64::from(sorted[n / 2])) / 2.0
    }
}

/// Builds the feature vector of one user from their ratings (values 1..=5).
/// `max_user_count` is the largest per-user interaction count in the dataset.
pub fn extract_features(
    ratings: &[u8],
    profile: &UserProfile,
    max_user_count: usize,
) -> Result<UserFeatures> {
    if ratings.is_empty() {
        return Err(Error::Data(format!(
            "user {} has no interactions",
            profile.user_id
        )));
    }
    if max_user_count < ratings.len() {
        return Err(Error::Data(format!(
            "max per-user count {max_user_count} below user count {}",
            ratings.len()
        )));
    }
    if profile.occupation >= NUM_OCCUPATIONS {
        return Err(Error::Data(format!(
            "occupation {} out of range",
            profile.occupation
        )));
    }

    let mut levels = [0usize; 5];
    for &r in ratings {
        if !(1..=5).contains(&r) {
            return Err(Error::Data(format!("rating {r} outside 1..5")));
        }
        levels[usize::from(r - 1)] += 1;
    }
    let n = ratings.len() as f64;
    let norm = max_user_count as f64;

    let mut x = vec![0.0; FEATURE_DIM];
    x[SLOT_COUNT] = n / norm;
    for (level, &count) in levels.iter().enumerate() {
        x[SLOT_LEVEL_COUNTS + level] = count as f64 / norm;
        x[SLOT_LEVEL_SHARES + level] = count as f64 / n;
    }
    x[SLOT_HIGH_SHARE] = (levels[3] + levels[4]) as f64 / n;
    x[SLOT_LOW_SHARE] = (levels[0] + levels[1]) as f64 / n;
    x[SLOT_ENTROPY] = rating_entropy(&levels)?;

    let mut sorted = ratings.to_vec();
    sorted.sort_unstable();
    x[SLOT_MEDIAN] = median(&sorted) / 5.0;
    x[SLOT_MIN] = f64::from(sorted[0]) / 5.0;
    x[SLOT_MAX] = f64::from(sorted[sorted.len() - 1]) / 5.0;
    x[SLOT_MEAN] = sorted.iter().map(|&r| f64::from(r)).sum::<f64>() / n / 5.0;

    let gender = match profile.gender {
        Gender::Female => 0,
        Gender::Male => 1,
    };
    x[SLOT_GENDER + gender] = 1.0;
    x[SLOT_OCCUPATION + profile.occupation] = 1.0;
    x[SLOT_AGE + age_bucket(profile.age)] = 1.0;

    Ok(UserFeatures(x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn profile(gender: Gender, occupation: usize, age: u32) -> UserProfile {
        UserProfile {
            user_id: 0,
            age,
            gender,
            occupation,
        }
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(rating_entropy(&[0, 0, 7, 0, 0]).unwrap(), 0.0);
        assert!((rating_entropy(&[1, 1, 1, 1, 1]).unwrap() - 5f64.ln()).abs() < 1e-12);
        // -(0.5 ln 0.5 + 0.5 ln 0.5) = ln 2
        assert!((rating_entropy(&[2, 0, 0, 0, 2]).unwrap() - 0.693_147_180_559_945_3).abs() < 1e-12);
        assert!(rating_entropy(&[0; 5]).is_err());
    }

    #[test]
    fn age_buckets() {
        assert_eq!(age_bucket(30), 0);
        assert_eq!(age_bucket(34), 0);
        assert_eq!(age_bucket(35), 1);
        assert_eq!(age_bucket(40), 1);
        assert_eq!(age_bucket(45), 1);
        assert_eq!(age_bucket(46), 2);
        assert_eq!(age_bucket(50), 2);
    }

    #[test]
    fn all_top_ratings() {
        let x = extract_features(&[5, 5], &profile(Gender::Male, 0, 20), 10).unwrap();
        let x = x.as_slice();
        assert_eq!(x[SLOT_HIGH_SHARE], 1.0);
        assert_eq!(x[SLOT_LOW_SHARE], 0.0);
        assert_eq!(x[SLOT_ENTROPY], 0.0);
        assert_eq!(x[SLOT_COUNT], 0.2);
        assert_eq!(x[SLOT_MEDIAN], 1.0);
    }

    #[test]
    fn mixed_ratings_shares() {
        let ratings = [1u8, 2, 4, 5];
        let x = extract_features(&ratings, &profile(Gender::Male, 0, 20), 4).unwrap();
        let x = x.as_slice();
        // count-over-total oracle
        let high = ratings.iter().filter(|&&r| r >= 4).count() as f64 / ratings.len() as f64;
        let low = ratings.iter().filter(|&&r| r <= 2).count() as f64 / ratings.len() as f64;
        assert_eq!(x[SLOT_HIGH_SHARE], high);
        assert_eq!(x[SLOT_LOW_SHARE], low);
        assert_eq!(high, 0.5);
        assert_eq!(x[SLOT_MEDIAN], 3.0 / 5.0);
        assert_eq!(x[SLOT_MIN], 0.2);
        assert_eq!(x[SLOT_MAX], 1.0);
        assert_eq!(x[SLOT_MEAN], 0.6);
        assert_eq!(x[SLOT_COUNT], 1.0);
    }

    #[test]
    fn categorical_one_hots() {
        let x = extract_features(&[3], &profile(Gender::Female, 3, 40), 1).unwrap();
        let x = x.as_slice();
        assert_eq!(&x[SLOT_GENDER..SLOT_GENDER + 2], &[1.0, 0.0]);
        let mut occ = [0.0; 21];
        occ[3] = 1.0;
        assert_eq!(&x[SLOT_OCCUPATION..SLOT_OCCUPATION + 21], &occ);
        assert_eq!(&x[SLOT_AGE..SLOT_AGE + 3], &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn no_interactions_is_an_error() {
        assert!(extract_features(&[], &profile(Gender::Male, 0, 20), 5).is_err());
    }

    proptest! {
        #[test]
        fn entropy_within_bounds(counts in proptest::array::uniform5(0usize..50)) {
            prop_assume!(counts.iter().sum::<usize>() > 0);
            let h = rating_entropy(&counts).unwrap();
            prop_assert!(h >= 0.0);
            prop_assert!(h <= 5f64.ln() + 1e-12);
        }

        #[test]
        fn feature_vector_invariants(
            ratings in proptest::collection::vec(1u8..=5, 1..200),
            female in any::<bool>(),
            occupation in 0usize..21,
            age in 0u32..90,
        ) {
            let g = if female { Gender::Female } else { Gender::Male };
            let f = extract_features(&ratings, &profile(g, occupation, age), 250).unwrap();
            let x = f.as_slice();
            prop_assert_eq!(x.len(), FEATURE_DIM);
            prop_assert!(x.iter().all(|v| v.is_finite()));
            let sum = |r: std::ops::Range<usize>| x[r].iter().sum::<f64>();
            prop_assert!((sum(SLOT_LEVEL_SHARES..SLOT_LEVEL_SHARES + 5) - 1.0).abs() < 1e-12);
            for (start, width) in [(SLOT_GENDER, 2), (SLOT_OCCUPATION, 21), (SLOT_AGE, 3)] {
                let slice = &x[start..start + width];
                prop_assert_eq!(slice.iter().filter(|&&v| v == 1.0).count(), 1);
                prop_assert_eq!(slice.iter().filter(|&&v| v == 0.0).count(), width - 1);
            }
        }
    }
}
