//! Federated GCN recommendation with per-component local differential
//! privacy, plus the parameter-update attribute-inference attack used to
//! measure what the uploads leak.

pub mod attack;
pub mod config;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod federation;
pub mod nn;
pub mod privacy;
pub mod recommender;
pub mod rng;
pub mod selftest;

pub use error::{Error, Result};
