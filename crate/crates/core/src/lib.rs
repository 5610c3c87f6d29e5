//! Text-driven out-of-distribution segmentation.
//!
//! A twin-encoder vision-language segmentation model whose decoder queries are
//! text embeddings: one per in-distribution class plus learnable prompts mined
//! at graded semantic distances from those classes. Training adds attention-level
//! noise inside ground-truth outlier regions and keeps the encoders near frozen
//! snapshots of their initial weights. The crate also carries the synthetic scene
//! generator and the pixel- and object-level evaluation used to measure it.

mod binio;
pub mod config;
pub mod diffcore;
pub mod error;
pub mod kv;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod saa;
pub mod scoring;
pub mod synthio;
pub mod textspace;

pub use error::{Error, Result};
