//! Few-shot span classification toolkit: corpus preprocessing, semantic-type
//! taxonomy pruning with PageRank disambiguation, marked-span generation,
//! episodic sampling, a static-embedding BiLSTM span encoder, a
//! multi-prototype cosine-contrastive model trained with Reptile, and an
//! evaluation/ablation harness.

pub mod config;
pub mod corpus;
pub mod encoder;
pub mod episodes;
pub mod error;
pub mod evalreport;
pub mod numerics;
pub mod metatrain;
pub mod par;
pub mod pipeline;
pub mod protomodel;
pub mod spans;
pub mod synth;
pub mod taxonomy;

pub use error::{Error, Result};
