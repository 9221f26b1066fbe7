//! GloCOM: a neural topic model for short texts that clusters documents into
//! global contexts, infers global and local topic distributions jointly, and
//! regularizes topic embeddings with entropic optimal transport.

pub mod aggregation;
pub mod corpus;
pub mod ecr;
pub mod error;
pub mod eval;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod rng;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, Result};
