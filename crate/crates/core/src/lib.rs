//! Attribute value extraction as sequence tagging.
//!
//! The building blocks are a small reverse-mode autodiff engine, a
//! BiLSTM encoder, pairwise sigmoid self-attention and a linear-chain
//! CRF. On top of them sit tag schemes, corpus handling, a trainer and
//! tag-flip active learning.

pub mod active;
pub mod attention;
pub mod autodiff;
pub mod corpus;
pub mod crf;
pub mod embeddings;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod optim;
pub mod params;
pub mod recurrent;
pub mod tags;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
pub use tags::{SchemeKind, TagScheme};
pub use tensor::Tensor;
