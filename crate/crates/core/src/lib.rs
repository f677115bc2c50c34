//! Vocalization detection and classification in long-form audio recordings.

pub mod audio;
pub mod augment;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod features;
pub mod hpo;
pub mod metrics;
pub mod nnet;
pub mod optim;
pub mod segment;
pub mod synth;

pub use error::{Error, Result};
