//! Simulator for federated prompt tuning with disentangled global, domain and
//! query prompts over frozen dual encoders.

pub mod config;
pub mod datagen;
pub mod encoders;
pub mod error;
pub mod experiment;
pub mod federation;
pub mod gradcheck;
pub mod inference;
pub mod json;
pub mod numerics;
pub mod objectives;
pub mod prompts;

pub use error::{Error, Result};
