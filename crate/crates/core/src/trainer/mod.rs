//! Training orchestration: data pipeline, schedules, BMUF multi-worker
//! synchronization, the three training modes (transducer, risk fine-tune,
//! language model), and CER evaluation.

mod bmuf;
mod config;
mod data;
mod engine;
mod eval;

pub use bmuf::bmuf_sync;
pub use config::{lr_at, Mode, TrainConfig};
pub use data::{build_pipeline, synth_dataset, SYNTH_FEATURE_DIM};
pub use engine::{train_mbr, train_nnlm, train_rnnt, MetricsRecord, TrainReport};
pub use eval::{evaluate_cer, CerReport};
