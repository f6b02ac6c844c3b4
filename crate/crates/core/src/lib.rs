//! Late-interaction passage retrieval with collective relevance labeling.
//!
//! The crate is organized by pipeline stage:
//!
//! * [`embeddings`]: token embedding providers, the encoding counter and the
//!   binary embedding file.
//! * [`index`]: corpus statistics, the projected passage index and exact
//!   top-k retrieval.
//! * [`relevance`]: MaxSim, softmax/KL/hard losses and their gradients with
//!   respect to the projection.
//! * [`collective`]: the PRF-augmented teacher and hard-negative mining.
//! * [`distill`]: student training against teacher labels.
//! * [`evalkit`]: ranking metrics, response time, PR curves and the
//!   hyperparameter sweep.
//! * [`synthetic`]: a topic-structured dataset generator with planted
//!   unlabeled positives.

pub mod collective;
pub mod distill;
pub mod embeddings;
pub mod error;
pub mod evalkit;
pub mod ids;
pub mod index;
pub mod linalg;
pub mod relevance;
pub mod seed;
pub mod synthetic;

pub use error::{Error, Result};
pub use ids::{PassageId, QueryId, TokenId};
