//! Multilingual adaptation toolkit for multimodal embedding models.
//!
//! The pipeline runs in four stages, each usable on its own:
//!
//! 1. [`translate`]: wrap training instances with `Question:`/`Answer:`
//!    markers, translate them, split the result back and emit parallel
//!    English/translated pairs.
//! 2. [`distill`]: train a student encoder so that it embeds both sides of
//!    each pair where a frozen copy of itself (the teacher) embeds the
//!    English side.
//! 3. [`bench`]: build retrieval suites with seeded candidate pools and
//!    per-language instruction templates.
//! 4. [`eval`]: rank candidates, report P@1 per task and language, and
//!    compare two models with McNemar's test.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix it to `f64`, which is what the command line uses.

pub mod bench;
pub mod cli;
pub mod corpus;
pub mod distill;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod hash;
pub mod rng;
pub mod scalar;
pub mod synth;
pub mod translate;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Params = encoder::EncoderParams<f64>;
pub type FrozenParams = encoder::Frozen<f64>;
pub type Pooled = encoder::PooledVector<f64>;
pub type Matrix = encoder::EmbeddingMatrix<f64>;
pub type Images = corpus::ImageStore<f64>;
pub type Prepared = distill::PreparedPair<f64>;
pub type Grads = distill::Gradients<f64>;
pub type Embeddings = corpus::EmbeddingTable<f64>;

/// Single-precision variants.
pub type Params32 = encoder::EncoderParams<f32>;
pub type Pooled32 = encoder::PooledVector<f32>;
