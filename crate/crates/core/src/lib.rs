//! Embedding-space simulation of x-vector speaker anonymization.
//!
//! The crate models the path of a speaker embedding through a pool-based
//! anonymizer (`x_o -> x_p`) and a vocoder surrogate channel (`x_p -> x_a`),
//! measures target distance and vocoder drift, evaluates privacy with
//! equal error rates, and mounts three attacks against the protected
//! embeddings: lazy-informed, semi-informed and drift reversal.

pub mod anonymizer;
pub mod attacks;
pub mod channel;
pub mod corpus;
pub mod embedding;
pub mod error;
pub mod evaluation;
pub mod neuralnet;
pub mod rng;

pub use embedding::{centroid, cosine_distance, cosine_similarity, l2_normalize, EmbeddingVector};
pub use error::{Error, Result};
