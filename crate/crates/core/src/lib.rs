//! Cross-domain dense entity linking at desk scale.
//!
//! Two knowledge bases (a general-domain one and a domain-specific one) are
//! merged into a single catalog. A bi-encoder maps mentions and entities into
//! one vector space; mentions are linked by exact cosine retrieval, optionally
//! re-ranked by a cross-encoder, and scored with AP@k / MAP@k / AP@1. Overlapping
//! entities between the two KBs can be extracted and used for an extra alignment
//! stage, and pairs of systems are compared with a paired randomization test.

pub mod biencoder;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod crossencoder;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod index;
pub mod overlap;
pub mod stats;
pub mod tokenizer;

pub use error::{Error, ErrorKind, Result};
