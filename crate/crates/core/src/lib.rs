//! Desk-scale sequence-transducer engine.
//!
//! The crate implements an RNN-T (encoder / prediction network / gated joint)
//! with a tape-based reverse-mode autodiff core, transducer forward-backward
//! loss, N-best beam search with blank-aware shallow fusion against an external
//! recurrent LM, minimum-Bayes-risk fine-tuning over on-the-fly N-best spaces,
//! and BMUF-style multi-worker training.
//!
//! Batch-level work (per-utterance gradients, decoding, evaluation) runs
//! data-parallel via rayon when the `parallel` feature is enabled (default);
//! disabling the feature yields a fully sequential build with identical
//! numerics.

pub mod beam;
pub mod checks;
pub mod error;
pub mod io;
pub mod math;
pub mod mbr;
pub mod model;
pub mod parallel;
pub mod tape;
pub mod tensor;
pub mod trainer;
pub mod transducer;

pub use error::{Error, Result};
pub use tensor::Tensor;
