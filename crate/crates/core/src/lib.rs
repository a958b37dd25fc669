//! Context extension for a small frozen decoder by chunked parallel decoding.
//!
//! Long inputs are split into memory chunks and local tokens. Each chunk,
//! followed by a short fragment of the local tokens, is decoded
//! independently; the hidden state at its final position (the candidate
//! token) is produced with a separate set of trainable attention
//! projections. The candidates' per-layer keys and values are then
//! prepended to the frozen decoder's cache while it processes the local
//! tokens.

pub mod autograd;
pub mod data;
pub mod error;
pub mod eval;
pub mod focus;
pub mod model;
pub mod optim;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
