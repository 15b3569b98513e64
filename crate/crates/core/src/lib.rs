//! Table structure recognition with a linear-projection vision transformer.
//!
//! The crate covers the whole pipeline: the HTML structure vocabulary and
//! tree parser, the TEDS metric, a small reverse-mode autograd stack with
//! transformer layers, a patch-aligned VQ-VAE tokenizer, masked-image-modeling
//! pre-training of the visual encoder, autoregressive fine-tuning with greedy
//! decoding, and a deterministic synthetic table generator.

pub mod config;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod grammar;
pub mod imageio;
pub mod mim;
pub mod synth;
pub mod nn;
pub mod pipeline;
pub mod ted;
pub mod teds;
pub mod tensor;
pub mod tsr;
pub mod vqvae;

pub use error::{Error, Result};
pub use grammar::{TableClass, TableTree, TokenId, TokenSeq, Vocabulary};
pub use tensor::{Real, Tensor};
