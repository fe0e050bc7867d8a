//! Language-routed mixture-of-experts CTC encoders, end to end on the CPU.
//!
//! The crate builds four encoder variants over a shared transformer core —
//! a dense baseline, a sparsely-gated top-1 mixture, and two
//! language-routed mixtures (utterance-wise and frame-wise) whose expert
//! choice comes from a jointly trained frame-level language-ID head — plus
//! everything needed to exercise them at desk scale: a reverse-mode
//! autodiff tensor core, CTC loss and decoding, a synthetic code-switching
//! corpus, an Adam training loop, evaluation metrics, and an analytic
//! parameter/FLOPs cost model.
//!
//! Start with the runnable examples (`cargo run --release -p lrmoe
//! --example <name>`) or the `lrmoe` binary.

pub mod checkpoint;
pub mod cli;
pub mod corpus;
pub mod cost;
pub mod ctc;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod routing;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
