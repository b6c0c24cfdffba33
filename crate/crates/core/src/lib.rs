//! Sequence models for coded clinical visit streams.
//!
//! A patient's record is an ordered list of timestamped visits, each carrying
//! a set of grouped medical codes. The library trains a stacked-GRU network
//! that jointly predicts the next visit's code set and the log time-gap to
//! it, pretrains code embeddings with skip-gram, ships the standard
//! frequency/lagged baselines, and evaluates everything with top-k recall
//! and R² over log-gaps. A synthetic hidden-Markov cohort generator provides
//! data at desk scale, and checkpoints make every run reproducible bit for
//! bit.

pub mod baselines;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gru;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod rng;
pub mod serial;
pub mod skipgram;
pub mod synth;
pub mod tensor;
pub mod vocab;

pub use error::{Error, Result};
