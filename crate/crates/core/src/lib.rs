//! Label-free fair representation learning over precomputed embeddings.
//!
//! The crate is organized as a pipeline:
//!
//! - [`store`]: embedding matrices, manifests and their on-disk formats
//! - [`curation`]: deduplication, nearest-neighbor retrieval and quality filtering
//! - [`pseudolabel`]: zero-shot binary pseudo-labels from text-template embeddings
//! - [`netcore`]: the MLP encoder, projection head and linear head with exact gradients
//! - [`losses`]: contrastive, supervised-contrastive and top-k objectives
//! - [`trainer`]: contrastive pretraining and the meta-weighted stage
//! - [`evalkit`]: linear probing and group fairness metrics
//! - [`pipeline`]: config-driven orchestration used by the `fairssl` binary
//!
//! Data-parallel loops go through [`par`], which uses rayon when the
//! `parallel` feature is enabled and plain iterators otherwise. Results never
//! depend on the number of worker threads.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod curation;
pub mod error;
pub mod evalkit;
pub mod gradcheck;
pub mod losses;
pub mod netcore;
pub mod par;
pub mod pipeline;
pub mod pseudolabel;
pub mod rng;
pub mod store;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
