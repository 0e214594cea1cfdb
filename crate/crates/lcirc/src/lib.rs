//! Long-context language modeling by recurrent compression.
//!
//! A small frozen decoder-only language model is extended past its
//! positional window: out-of-window context is folded, segment by segment,
//! into a fixed-length block of feature vectors by a recurrent Perceiver
//! compressor, and those features are injected into every decoder layer
//! through gated cross-attention that starts as an exact identity. A
//! query-dependent variant conditions each compression step on the query
//! so the compressor keeps what the question needs.
//!
//! The crate is self-contained: dense f64 tensors, a reverse-mode tape,
//! training loops (truncated and selective backpropagation through time),
//! three inference regimes, an analytic cost model, byte-level data
//! generation, and evaluation utilities.

pub mod attn;
pub mod checkpoint;
pub mod compressor;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod flops;
pub mod infer;
pub mod injector;
pub mod lm;
pub mod params;
pub mod qd;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
