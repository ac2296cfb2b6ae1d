//! MovieLens ingestion, user features and per-client shards.

mod features;
mod movielens;
mod shard;
mod synthetic;

pub use features::{
    age_bucket, extract_features, rating_entropy, Attribute, PrivateLabels, UserFeatures,
    AGE_CLASSES, FEATURE_DIM, GENDER_CLASSES,
};
pub use movielens::{
    load_movielens, parse_movielens, DataFormat, Gender, Interaction, LoadReport, MovieLens,
    UserProfile, ML100K_OCCUPATIONS, NUM_OCCUPATIONS,
};
pub use shard::{build_shards, leave_one_out_split, sample_negatives, UserShard};
pub use synthetic::{synthetic_movielens, synthetic_text, SyntheticSpec};

pub mod layout {
    //! Slot offsets inside [`super::UserFeatures`].
    pub use super::features::{
        SLOT_AGE, SLOT_COUNT, SLOT_ENTROPY, SLOT_GENDER, SLOT_HIGH_SHARE, SLOT_LEVEL_COUNTS,
        SLOT_LEVEL_SHARES, SLOT_LOW_SHARE, SLOT_MAX, SLOT_MEAN, SLOT_MEDIAN, SLOT_MIN,
        SLOT_OCCUPATION,
    };
}
