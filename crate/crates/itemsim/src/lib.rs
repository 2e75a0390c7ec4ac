//! Similarity surveillance engine for multiple-choice item banks.
//!
//! The pipeline generates MCQ items under naive and guided prompting
//! strategies, parses the raw generations into a validated item bank, embeds
//! each item's canonical text with pluggable sentence encoders, and measures
//! semantic overlap via intra-/inter-strategy cosine similarity with
//! threshold-band classification and flag reports.

pub mod config;
pub mod corpus;
pub mod embedder;
pub mod genharness;
pub mod parser;
pub mod pipeline;
pub mod report;
pub mod simengine;
