//! Synthetic face-identity dataset generation at desk scale.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense arrays and tape-based reverse-mode gradients.
//! - [`embedding`]: embedding vectors, the frozen oracle embedder, blocked
//!   cosine scans and the binary vector store.
//! - [`sampler`]: separable identity-vector sampling and intra-class
//!   perturbation.
//! - [`generator`]: the row-masked feature autoencoder generator, its losses
//!   and training loop, plus the procedural toy image world.
//! - [`attrop`]: gradient search over input vectors toward target quality and
//!   pose while preserving identity.
//! - [`lora`]: low-rank adapters and the landmark condition encoder for pose
//!   control.
//! - [`dataset`]: manifests, image archives, gates, assembly, DBSCAN cleaning
//!   and leakage filtering.
//! - [`metrics`]: separability, consistency, attribute statistics and
//!   verification protocols.
//! - [`pipeline`]: configuration, stage orchestration, run records and the
//!   consolidated report.

pub mod attrop;
pub mod dataset;
pub mod embedding;
pub mod error;
pub mod generator;
pub mod io;
pub mod lora;
pub mod metrics;
pub mod pipeline;
pub mod rng;
pub mod sampler;
pub mod tensor;

pub use error::{Error, Result};
