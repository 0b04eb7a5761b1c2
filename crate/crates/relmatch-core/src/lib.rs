//! Relation-aware image-text matching and captioning over precomputed
//! region and relation features.
//!
//! The crate is organized around a small reverse-mode differentiation
//! engine ([`diffcore`]); on top of it sit a bi-directional GRU text
//! encoder ([`textenc`]), the visual feature ingestion and projection layer
//! ([`visenc`]), the gated cross-attention similarity model and its triplet
//! training loop ([`matcher`]), a dual-attention two-layer LSTM captioner
//! with cross-entropy and self-critical training ([`captioner`]), retrieval
//! and caption metrics ([`metrics`]), and the semantic-relation caption
//! split builder ([`vrrsplit`]).

pub mod captioner;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod diffcore;
pub mod error;
pub mod matcher;
pub mod metrics;
pub mod params;
pub mod rng;
pub mod textenc;
pub mod visenc;
pub mod vrrsplit;

pub use error::{Error, Result};
