//! Training-side companion to `nabla-core`: dataset ingestion and
//! augmentation, a synthetic-lesion generator for desk-scale runs,
//! binary checkpointing with transfer loading, run configuration, and
//! the train/evaluate/predict loops behind the CLI.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
