//! Bag-level relation extraction under distant supervision.
//!
//! The crate implements two model families over dependency-parsed text:
//! a piecewise-convolutional sentence encoder (the `baseline` strategy)
//! and its syntax-aware extensions (`cat`, `trans`) that add per-entity
//! tree-GRU embeddings computed over the dependency subtree rooted at
//! each entity. Sentence and entity embeddings are pooled per bag with
//! self-attention and scored against the relation inventory.
//!
//! Everything runs on a small fp64 expression tape with reverse-mode
//! gradients, so every forward path is differentiable and checkable
//! against central finite differences (see [`gradcheck`]).
//!
//! All randomness flows through the seeded [`rng::Rng`]; identical
//! inputs and seeds produce bit-identical models, checkpoints and
//! report files.

pub mod cli;
pub mod corpus;
pub mod embeddings;
pub mod error;
pub mod evaluator;
pub mod gradcheck;
pub mod model;
pub mod params;
pub mod pcnn;
pub mod rng;
pub mod sgns;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod trainer;
pub mod tree_gru;

pub use error::{Error, Result};
