//! The local GCN recommender: parameters, forward/backward and local SGD.

mod model;
mod params;
mod train;

pub use model::{
    aggregate_neighbors, batch_loss, embed, embed_item, embed_user, score, score_logit,
    user_convolution, user_state, CatalogScorer, ItemFeatureTable, UserContext, UserState,
};
pub use params::{
    read_params, write_params, Block, BlockShape, ComponentTag, InitScheme, ParamHeader, ParamLayout,
    ParamSet, PARAM_FORMAT,
};
pub use train::{local_train, local_train_with, Hyper, LocalOutcome};
