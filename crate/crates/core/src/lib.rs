//! Evolutionary search for classification prompt ensembles over precomputed
//! vision-language embeddings.
//!
//! A prompt for a class is the average of several text embeddings: template
//! instances ("a photo of a {}.") and class descriptions. The search first
//! picks a set of shared templates, then per-class descriptions for a few
//! salient class groups, using add/delete/replace edits plus crossover and
//! mutation, and ranks candidates by one-shot accuracy plus a confidence
//! term.

pub mod driver;
pub mod error;
pub mod library;
pub mod sampling;
pub mod scoring;
pub mod search;
pub mod store;
pub mod synth;

pub use error::{Error, Result};
