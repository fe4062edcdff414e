//! Training configuration: UTF-8 key=value files, flag overrides, and the
//! log-linear learning-rate schedule.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Rnnt,
    Mbr,
    Nnlm,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Rnnt => "rnnt",
            Mode::Mbr => "mbr",
            Mode::Nnlm => "nnlm",
        })
    }
}

/// Feature frames per second of audio-equivalent length; used to apply the
/// `max_utt_seconds` filter to frame counts.
pub const FRAMES_PER_SECOND: f64 = 100.0;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub mode: Mode,
    pub initial_lr: f64,
    pub final_lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Batches between BMUF synchronizations.
    pub sync_period: usize,
    pub workers: usize,
    pub block_momentum: f64,
    pub block_lr: f64,
    pub max_utt_seconds: f64,
    pub seed: u64,
    /// L2 gradient clip per batch; 0 disables clipping.
    pub grad_clip: f64,
    /// Beam width for on-the-fly N-best generation in risk fine-tuning.
    pub beam: usize,
    pub nbest: usize,
    /// LM fusion weight during N-best generation.
    pub lm_weight: f64,
    /// Softmax smoothing during N-best generation.
    pub smoothing: f64,
    /// Weight of the transducer NLL regularizer in the risk objective.
    pub rnnt_weight: f64,
    /// Truncated-backprop window for LM training.
    pub bptt: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::Rnnt,
            initial_lr: 1e-3,
            final_lr: 1e-4,
            epochs: 5,
            batch_size: 8,
            sync_period: 5,
            workers: 1,
            block_momentum: 0.9,
            block_lr: 1.0,
            max_utt_seconds: 12.0,
            seed: 1,
            grad_clip: 5.0,
            beam: 2,
            nbest: 2,
            lm_weight: 0.0,
            smoothing: 1.0,
            rnnt_weight: 1.0,
            bptt: 64,
        }
    }
}

impl TrainConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| Error::Config(format!("{}: invalid value {:?}", what, value));
        match key {
            "mode" => {
                self.mode = match value {
                    "rnnt" => Mode::Rnnt,
                    "mbr" => Mode::Mbr,
                    "nnlm" => Mode::Nnlm,
                    _ => return Err(bad("mode")),
                }
            }
            "initial_lr" => self.initial_lr = value.parse().map_err(|_| bad(key))?,
            "final_lr" => self.final_lr = value.parse().map_err(|_| bad(key))?,
            "epochs" => self.epochs = value.parse().map_err(|_| bad(key))?,
            "batch_size" => self.batch_size = value.parse().map_err(|_| bad(key))?,
            "sync_period" => self.sync_period = value.parse().map_err(|_| bad(key))?,
            "workers" => self.workers = value.parse().map_err(|_| bad(key))?,
            "block_momentum" => self.block_momentum = value.parse().map_err(|_| bad(key))?,
            "block_lr" => self.block_lr = value.parse().map_err(|_| bad(key))?,
            "max_utt_seconds" => self.max_utt_seconds = value.parse().map_err(|_| bad(key))?,
            "seed" => self.seed = value.parse().map_err(|_| bad(key))?,
            "grad_clip" => self.grad_clip = value.parse().map_err(|_| bad(key))?,
            "beam" => self.beam = value.parse().map_err(|_| bad(key))?,
            "nbest" => self.nbest = value.parse().map_err(|_| bad(key))?,
            "lm_weight" => self.lm_weight = value.parse().map_err(|_| bad(key))?,
            "smoothing" => self.smoothing = value.parse().map_err(|_| bad(key))?,
            "rnnt_weight" => self.rnnt_weight = value.parse().map_err(|_| bad(key))?,
            "bptt" => self.bptt = value.parse().map_err(|_| bad(key))?,
            _ => return Err(Error::Config(format!("unknown config key {:?}", key))),
        }
        Ok(())
    }

    /// Parse a key=value file ('#' starts a comment, blank lines ignored).
    pub fn parse(text: &str) -> Result<Self> {
        let mut config = TrainConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value, got {:?}", lineno + 1, raw))
            })?;
            config.set(key.trim(), value.trim())?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.initial_lr <= 0.0 || self.final_lr <= 0.0 {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.final_lr > self.initial_lr {
            return Err(Error::Config(format!(
                "final_lr {} exceeds initial_lr {}",
                self.final_lr, self.initial_lr
            )));
        }
        if self.batch_size == 0 || self.sync_period == 0 || self.workers == 0 {
            return Err(Error::Config(
                "batch_size, sync_period and workers must be positive".into(),
            ));
        }
        if self.beam == 0 || self.nbest == 0 || self.nbest > self.beam {
            return Err(Error::Config("need 1 <= nbest <= beam".into()));
        }
        if self.block_momentum < 0.0 || self.block_momentum >= 1.0 {
            return Err(Error::Config("block_momentum must be in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn max_frames(&self) -> usize {
        (self.max_utt_seconds * FRAMES_PER_SECOND) as usize
    }
}

/// Log-linear learning-rate decay: `initial * exp((p/t) * ln(final/initial))`,
/// i.e. log(lr) interpolates linearly from log(initial) to log(final).
pub fn lr_at(config: &TrainConfig, processed: usize, total: usize) -> Result<f64> {
    if total == 0 {
        return Err(Error::Contract("lr schedule needs a positive batch total".into()));
    }
    if processed > total {
        return Err(Error::Contract(format!(
            "processed {} exceeds total {}",
            processed, total
        )));
    }
    let frac = processed as f64 / total as f64;
    Ok(self::schedule(config.initial_lr, config.final_lr, frac))
}

fn schedule(initial: f64, fin: f64, frac: f64) -> f64 {
    initial * (frac * (fin / initial).ln()).exp()
}
