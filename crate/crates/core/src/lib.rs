//! Desk-scale satellite vision-language pipeline: tiered prompting and
//! captioning of satellite tiles, a bidirectional caption grammar, 512-dim
//! caption embeddings, attention-fused MLP regression of the Social
//! Vulnerability Index with county aggregation, and Shapley attribution of
//! the embedding dimensions that drive predictions.

pub mod captioner;
pub mod corpus;
pub mod encode;
pub mod error;
pub mod explain;
pub mod fusion;
pub mod gradcheck;
pub mod grammar;
pub mod linalg;
pub mod mlp;
pub mod prompting;
pub mod provider;
pub mod seeds;
pub mod text;

pub use error::{Error, Result};
