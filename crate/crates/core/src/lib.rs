//! Cross-episodic curriculum training for memory-augmented sequence
//! policies.
//!
//! Episodes from an improving source (a learning agent's snapshots, a
//! ladder of harder task variants, or demonstrators of growing skill) are
//! partitioned into ordered levels, concatenated level by level into long
//! curricular sequences, and used to train a causal segment-recurrent
//! policy whose attention spans episode boundaries. At test time the
//! policy's memory is carried across episodes.

pub mod cli;
pub mod curriculum;
pub mod datagen;
pub mod envs;
pub mod episode;
pub mod model;
pub mod error;
pub mod evalharness;
pub mod numcore;
pub mod seeds;
pub mod trainer;

pub use error::{Error, Result};
