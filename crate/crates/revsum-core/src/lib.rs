//! Personalized review summarization.
//!
//! A review encoder feeds per-user and per-item history graphs; relational
//! graph convolutions condense each history into a vector; a contrastive term
//! pushes the two apart; an attentive fusion drives both a sentiment
//! classifier and a sentiment-gated transformer decoder that writes the
//! summary. This crate contains the full pipeline: corpus handling, the
//! differentiable model, training, decoding, and evaluation.

pub mod config;
pub mod contrastive;
pub mod corpus;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod params;
pub mod parallel;
pub mod sentiment;
pub mod synthetic;
pub mod tape;
pub mod trainer;

pub use error::{Error, Result};
