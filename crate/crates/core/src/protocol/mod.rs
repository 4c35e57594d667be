//! Identification protocol metadata and synthetic datasets.

pub mod metadata;
pub mod synth;
