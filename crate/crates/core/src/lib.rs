//! Graph-augmented sequence-to-sequence link prediction for knowledge graphs.
//!
//! The pipeline: load a triple store ([`kg`]), sample a k-hop neighborhood
//! around each query entity ([`sampler`]), verbalize the query and every
//! neighborhood triple ([`verbalize`]), encode them with a transformer
//! encoder, propagate entity features with relational graph attention,
//! distill each sequence into a few vectors and decode the missing entity's
//! mention ([`model`]). [`train`] fits the network end to end and [`eval`]
//! ranks generated mentions under the filtered protocol.

pub mod config;
pub mod error;
pub mod eval;
pub mod features;
pub mod kg;
pub mod model;
pub mod sampler;
pub mod seed;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod verbalize;

pub mod cli;

pub use error::{Error, Result};
