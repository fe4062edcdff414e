//! Model architecture configuration.
//!
//! Two named presets ship: `desk` (trains in minutes on CPU, used by tests
//! and the synthetic pipeline) and `paper_scale` (the full-size configuration;
//! constructed and counted, never trained here).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum EncoderLayerConfig {
    Tdnn { offsets: Vec<i64>, stride: usize, out_dim: usize },
    Transformer { d_model: usize, d_ff: usize, heads: usize, dropout: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub feature_dim: usize,
    pub layers: Vec<EncoderLayerConfig>,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let mut strided = Vec::new();
        let mut last_tdnn = None;
        for (i, l) in self.layers.iter().enumerate() {
            if let EncoderLayerConfig::Tdnn { offsets, stride, .. } = l {
                last_tdnn = Some(i);
                if *stride > 1 {
                    strided.push(i);
                }
                // context must be symmetric around 0
                for &o in offsets {
                    if !offsets.contains(&-o) {
                        return Err(Error::Config(format!(
                            "encoder layer {}: context {:?} is not symmetric",
                            i, offsets
                        )));
                    }
                }
            }
        }
        if strided.len() > 1 {
            return Err(Error::Config("at most one encoder layer may have stride > 1".into()));
        }
        if let Some(&s) = strided.first() {
            if Some(s) != last_tdnn {
                return Err(Error::Config(
                    "the strided layer must be the final TDNN layer".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn stride_product(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                EncoderLayerConfig::Tdnn { stride, .. } => *stride,
                _ => 1,
            })
            .product()
    }

    /// One-sided receptive field in input frames.
    pub fn receptive_field(&self) -> usize {
        let mut field = 0usize;
        let mut rate = 1usize;
        for l in &self.layers {
            if let EncoderLayerConfig::Tdnn { offsets, stride, .. } = l {
                let reach = offsets.iter().map(|o| o.unsigned_abs() as usize).max().unwrap_or(0);
                field += reach * rate;
                rate *= stride;
            }
        }
        field
    }

    /// Fewest input frames `encode` accepts: enough to cover the widest
    /// single-layer context and to produce at least one strided output.
    pub fn min_frames(&self) -> usize {
        let span = self
            .layers
            .iter()
            .filter_map(|l| match l {
                EncoderLayerConfig::Tdnn { offsets, .. } => {
                    let lo = offsets.iter().min().copied().unwrap_or(0);
                    let hi = offsets.iter().max().copied().unwrap_or(0);
                    Some((hi - lo + 1) as usize)
                }
                _ => None,
            })
            .max()
            .unwrap_or(1);
        span.max(self.stride_product())
    }

    pub fn output_dim(&self) -> usize {
        let mut dim = self.feature_dim;
        for l in &self.layers {
            match l {
                EncoderLayerConfig::Tdnn { out_dim, .. } => dim = *out_dim,
                EncoderLayerConfig::Transformer { d_model, .. } => dim = *d_model,
            }
        }
        dim
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DecoderLayerConfig {
    CausalConv { out_dim: usize, kernel: usize },
    Transformer { d_model: usize, d_ff: usize, heads: usize, dropout: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub embed_dim: usize,
    pub layers: Vec<DecoderLayerConfig>,
}

impl DecoderConfig {
    pub fn output_dim(&self) -> usize {
        let mut dim = self.embed_dim;
        for l in &self.layers {
            match l {
                DecoderLayerConfig::CausalConv { out_dim, .. } => dim = *out_dim,
                DecoderLayerConfig::Transformer { d_model, .. } => dim = *d_model,
            }
        }
        dim
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RnntConfig {
    /// Non-blank symbol count V; output distributions cover V + 1 entries.
    pub vocab_size: usize,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub joint_dim: usize,
    pub init_seed: u64,
}

impl RnntConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 1 {
            return Err(Error::Config("vocab_size must be >= 1".into()));
        }
        self.encoder.validate()
    }

    /// Tiny configuration that trains in minutes on a CPU.
    pub fn desk(vocab_size: usize, feature_dim: usize) -> Self {
        RnntConfig {
            vocab_size,
            encoder: EncoderConfig {
                feature_dim,
                layers: vec![
                    EncoderLayerConfig::Tdnn { offsets: vec![-1, 0, 1], stride: 1, out_dim: 32 },
                    EncoderLayerConfig::Tdnn { offsets: vec![-1, 0, 1], stride: 2, out_dim: 32 },
                    EncoderLayerConfig::Transformer { d_model: 32, d_ff: 64, heads: 2, dropout: 0.1 },
                ],
            },
            decoder: DecoderConfig {
                embed_dim: 32,
                layers: vec![
                    DecoderLayerConfig::CausalConv { out_dim: 32, kernel: 3 },
                    DecoderLayerConfig::Transformer { d_model: 32, d_ff: 64, heads: 2, dropout: 0.1 },
                ],
            },
            joint_dim: 32,
            init_seed: 1,
        }
    }

    /// Full-size configuration: 9 TDNN + 3 transformer encoder layers in
    /// three blocks (strided final TDNN), 3 causal-conv + 3 transformer
    /// decoder layers, 40-dim features, 6267 non-blank symbols.
    pub fn paper_scale() -> Self {
        let tdnn = |offsets: Vec<i64>, stride: usize| EncoderLayerConfig::Tdnn {
            offsets,
            stride,
            out_dim: 1024,
        };
        let tf = |heads: usize| EncoderLayerConfig::Transformer {
            d_model: 1024,
            d_ff: 1024,
            heads,
            dropout: 0.2,
        };
        RnntConfig {
            vocab_size: 6267,
            encoder: EncoderConfig {
                feature_dim: 40,
                layers: vec![
                    tdnn(vec![-1, 0, 1], 1),
                    tdnn(vec![-1, 0, 1], 1),
                    tdnn(vec![-1, 0, 1], 1),
                    tf(16),
                    tdnn(vec![-3, 0, 3], 1),
                    tdnn(vec![-3, 0, 3], 1),
                    tdnn(vec![-3, 0, 3], 1),
                    tf(16),
                    tdnn(vec![-3, 0, 3], 1),
                    tdnn(vec![-3, 0, 3], 1),
                    tdnn(vec![-3, 0, 3], 3),
                    tf(8),
                ],
            },
            decoder: DecoderConfig {
                embed_dim: 100,
                layers: vec![
                    DecoderLayerConfig::CausalConv { out_dim: 512, kernel: 5 },
                    DecoderLayerConfig::Transformer { d_model: 512, d_ff: 2048, heads: 8, dropout: 0.2 },
                    DecoderLayerConfig::CausalConv { out_dim: 512, kernel: 5 },
                    DecoderLayerConfig::Transformer { d_model: 512, d_ff: 2048, heads: 8, dropout: 0.2 },
                    DecoderLayerConfig::CausalConv { out_dim: 512, kernel: 5 },
                    DecoderLayerConfig::Transformer { d_model: 512, d_ff: 2048, heads: 8, dropout: 0.2 },
                ],
            },
            joint_dim: 848,
            init_seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NnlmConfig {
    /// Non-blank symbol count V; the output layer covers V + 1 (SOS included).
    pub vocab_size: usize,
    pub embed_dim: usize,
    /// LSTM hidden sizes, one entry per layer.
    pub hidden: Vec<usize>,
    /// Optional projection between the last LSTM layer and the output matrix.
    pub projection: Option<usize>,
    pub init_seed: u64,
}

impl NnlmConfig {
    pub fn desk(vocab_size: usize) -> Self {
        NnlmConfig { vocab_size, embed_dim: 16, hidden: vec![64], projection: None, init_seed: 2 }
    }

    pub fn paper_scale() -> Self {
        NnlmConfig {
            vocab_size: 6267,
            embed_dim: 200,
            hidden: vec![1024, 1024],
            projection: Some(1024),
            init_seed: 2,
        }
    }
}
