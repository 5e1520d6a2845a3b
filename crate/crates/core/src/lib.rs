//! Semantic-ID toolkit: residual quantization of item embeddings into
//! hierarchical identifiers, collision repair, SID quality metrics, and a
//! small generative-retrieval loop over SID token streams.

pub mod alignment;
pub mod catalog;
pub mod cli;
pub mod collision;
pub mod error;
pub mod linalg;
pub mod optim;
pub mod quantizer;
pub mod retrieval;
pub mod sidmetrics;
pub mod toy;

pub use error::{Error, Result};
