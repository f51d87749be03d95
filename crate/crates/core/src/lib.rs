//! Cross-modal speech/text pre-training through a shared discrete unit
//! interface, built end to end at desk scale.
//!
//! Speech frames and text are both mapped to unit sequences (phoneme units
//! or k-means hidden units). A two-stack Transformer encoder is trained with
//! masked unit prediction on speech and unit-to-character CTC on text, with
//! random swapping of intermediate speech states for their unit embeddings.

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod experiment;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod rng;
pub mod tokenizers;
pub mod trainer;
pub mod units;
