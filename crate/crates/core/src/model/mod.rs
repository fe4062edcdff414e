//! RNN-T model (encoder, prediction network, gated joint, output head) and
//! the external recurrent neural LM, both size-configurable.

mod config;
mod nnlm;
mod params;
mod rnnt;
mod vocab;

pub use config::{
    DecoderConfig, DecoderLayerConfig, EncoderConfig, EncoderLayerConfig, NnlmConfig, RnntConfig,
};
pub use nnlm::{Nnlm, NnlmState, SOS};
pub use params::{Bound, ModelParams};
pub use rnnt::{output_distribution, DecoderState, RnntModel};
pub use vocab::{Vocab, BLANK};
