//! Frame-synchronous N-best beam search with blank-aware LM fusion.
//!
//! Search ranks hypotheses by a fused score: the transducer distribution is
//! smoothed (logits scaled by `beta` before normalization), then log-linearly
//! interpolated with an external LM over the non-blank symbols only. The
//! blank probability is never touched by fusion, and the non-blank mass is
//! rescaled so it still sums to what the smoothed transducer assigned it.
//! Alongside the fused score every hypothesis carries its raw (unsmoothed,
//! unfused) log-probability and one explicit alignment, which risk training
//! consumes.

use std::cmp::Ordering;
use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::math;
use crate::model::{DecoderState, Nnlm, NnlmState, RnntModel};
use crate::tensor::Tensor;

/// How transducer and LM scores combine during search.
#[derive(Debug, Clone, Copy)]
pub struct FusionConfig {
    /// LM interpolation weight (0 disables fusion entirely).
    pub lm_weight: f64,
    /// Softmax smoothing exponent applied to transducer logits at search time.
    pub smoothing: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig { lm_weight: 0.1, smoothing: 0.8 }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BeamConfig {
    pub beam: usize,
    pub nbest: usize,
    /// Cap on label emissions per encoder frame.
    pub max_symbols_per_frame: usize,
    pub fusion: FusionConfig,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig { beam: 8, nbest: 4, max_symbols_per_frame: 3, fusion: FusionConfig::default() }
    }
}

/// A completed hypothesis. `log_prob`/`fused_score` are summed over every
/// alignment the search merged into this label sequence; `alignment` is the
/// single best alignment, as `(frame, labels_consumed, symbol)` decisions.
#[derive(Debug, Clone)]
pub struct Hypothesis {
    pub labels: Vec<usize>,
    pub log_prob: f64,
    pub fused_score: f64,
    pub alignment: Vec<(usize, usize, usize)>,
}

/// Blank-aware shallow fusion of two log-distributions. `rnnt` covers blank
/// plus V symbols (blank first), `lm` covers the V symbols. The blank entry
/// passes through bit-exactly; non-blank entries are log-linearly mixed and
/// rescaled so their total mass is unchanged.
pub fn shallow_fuse(rnnt: &[f64], lm: &[f64], lm_weight: f64) -> Result<Vec<f64>> {
    if rnnt.len() != lm.len() + 1 {
        return Err(Error::ShapeMismatch {
            op: "shallow_fuse",
            details: format!("{} transducer entries vs {} lm entries", rnnt.len(), lm.len()),
        });
    }
    if !(0.0..=1.0).contains(&lm_weight) {
        return Err(Error::Contract(format!("lm weight must be in [0, 1], got {}", lm_weight)));
    }
    for (name, d) in [("transducer", rnnt), ("lm", lm)] {
        let sum: f64 = d.iter().map(|v| v.exp()).sum();
        if (sum - 1.0).abs() > 1e-5 {
            return Err(Error::Contract(format!(
                "{} distribution sums to {} before fusion",
                name, sum
            )));
        }
    }
    if lm_weight == 0.0 {
        return Ok(rnnt.to_vec());
    }
    let mixed: Vec<f64> = rnnt[1..]
        .iter()
        .zip(lm)
        .map(|(&r, &l)| (1.0 - lm_weight) * r + lm_weight * l)
        .collect();
    // renormalize the mixed part back onto the transducer's non-blank mass
    let target = math::log_sum_exp(rnnt[1..].iter().copied());
    let actual = math::log_sum_exp(mixed.iter().copied());
    let shift = target - actual;
    let mut out = Vec::with_capacity(rnnt.len());
    out.push(rnnt[0]);
    out.extend(mixed.iter().map(|v| v + shift));
    Ok(out)
}

struct Beam {
    labels: Vec<usize>,
    dec: DecoderState,
    lm: Option<NnlmState>,
    /// Raw log-probability, summed over merged alignments.
    log_prob: f64,
    /// Fused search score, summed over merged alignments.
    fused: f64,
    /// Raw log-probability of the single best alignment.
    best_path: f64,
    alignment: Vec<(usize, usize, usize)>,
}

impl Beam {
    fn merge(&mut self, other: Beam) {
        debug_assert_eq!(self.labels, other.labels);
        self.log_prob = math::log_add(self.log_prob, other.log_prob);
        self.fused = math::log_add(self.fused, other.fused);
        if other.best_path > self.best_path {
            self.best_path = other.best_path;
            self.alignment = other.alignment;
        }
    }
}

fn hyp_order(a: &Beam, b: &Beam) -> Ordering {
    b.fused
        .partial_cmp(&a.fused)
        .unwrap_or(Ordering::Equal)
        .then(a.labels.len().cmp(&b.labels.len()))
        .then_with(|| a.labels.cmp(&b.labels))
}

fn merge_into(map: &mut HashMap<Vec<usize>, Beam>, hyp: Beam) {
    match map.entry(hyp.labels.clone()) {
        std::collections::hash_map::Entry::Occupied(mut e) => e.get_mut().merge(hyp),
        std::collections::hash_map::Entry::Vacant(e) => {
            e.insert(hyp);
        }
    }
}

fn prune(mut hyps: Vec<Beam>, beam: usize) -> Vec<Beam> {
    hyps.sort_by(hyp_order);
    hyps.truncate(beam);
    hyps
}

/// N-best decoding over precomputed encoder states. Pass `lm: None` (or a
/// zero LM weight) for pure transducer search.
pub fn beam_search_nbest(
    model: &RnntModel,
    h_enc: &Tensor<f32>,
    lm: Option<&Nnlm>,
    config: &BeamConfig,
) -> Result<Vec<Hypothesis>> {
    if config.beam == 0 || config.nbest == 0 {
        return Err(Error::Config("beam and nbest must be positive".into()));
    }
    if config.nbest > config.beam {
        return Err(Error::Config(format!(
            "nbest {} exceeds beam width {}",
            config.nbest, config.beam
        )));
    }
    let fusion = &config.fusion;
    if fusion.smoothing <= 0.0 || fusion.smoothing > 1.0 {
        return Err(Error::Contract(format!(
            "smoothing factor must be in (0, 1], got {}",
            fusion.smoothing
        )));
    }
    let lm = if fusion.lm_weight == 0.0 { None } else { lm };
    if fusion.lm_weight > 0.0 && lm.is_none() {
        return Err(Error::Config("lm weight is positive but no lm was supplied".into()));
    }

    let frames = h_enc.rows();
    let vocab = model.config.vocab_size;
    let start = Beam {
        labels: Vec::new(),
        dec: model.decoder_start()?,
        lm: lm.map(|m| m.start()),
        log_prob: 0.0,
        fused: 0.0,
        best_path: 0.0,
        alignment: Vec::new(),
    };
    let mut frame_hyps = vec![start];

    for t in 0..frames {
        let mut next_frame: HashMap<Vec<usize>, Beam> = HashMap::new();
        let mut round = frame_hyps;
        for emitted in 0..=config.max_symbols_per_frame {
            let mut next_round: HashMap<Vec<usize>, Beam> = HashMap::new();
            for hyp in round {
                let logits = model.joint_eval(h_enc.row(t), &hyp.dec.out);
                let raw = math::log_softmax_vec(&logits).iter().map(|&v| v as f64).collect::<Vec<_>>();
                let smoothed: Vec<f64> = {
                    let scaled: Vec<f32> =
                        logits.iter().map(|&v| (v as f64 * fusion.smoothing) as f32).collect();
                    math::log_softmax_vec(&scaled).iter().map(|&v| v as f64).collect()
                };
                let search_dist = match (&hyp.lm, lm) {
                    (Some(state), Some(_)) => {
                        let lm_lp: Vec<f64> =
                            state.log_probs.iter().map(|&v| v as f64).collect();
                        shallow_fuse(&smoothed, &lm_lp, fusion.lm_weight)?
                    }
                    _ => smoothed,
                };

                // blank: consume the frame
                let u = hyp.labels.len();
                let mut blank = Beam {
                    labels: hyp.labels.clone(),
                    dec: hyp.dec.clone(),
                    lm: hyp.lm.clone(),
                    log_prob: hyp.log_prob + raw[0],
                    fused: hyp.fused + search_dist[0],
                    best_path: hyp.best_path + raw[0],
                    alignment: hyp.alignment.clone(),
                };
                blank.alignment.push((t, u, 0));
                merge_into(&mut next_frame, blank);

                if emitted == config.max_symbols_per_frame {
                    continue;
                }
                for k in 1..=vocab {
                    let mut labels = hyp.labels.clone();
                    labels.push(k);
                    let mut ext = Beam {
                        labels,
                        dec: model.decoder_step(&hyp.dec, k)?,
                        lm: match (&hyp.lm, lm) {
                            (Some(state), Some(m)) => Some(m.step(state, k)?),
                            _ => None,
                        },
                        log_prob: hyp.log_prob + raw[k],
                        fused: hyp.fused + search_dist[k],
                        best_path: hyp.best_path + raw[k],
                        alignment: hyp.alignment.clone(),
                    };
                    ext.alignment.push((t, u, k));
                    merge_into(&mut next_round, ext);
                }
            }
            round = prune(next_round.into_values().collect(), config.beam);
            if round.is_empty() {
                break;
            }
        }
        frame_hyps = prune(next_frame.into_values().collect(), config.beam);
    }

    let finished = prune(frame_hyps, config.nbest);
    Ok(finished
        .into_iter()
        .map(|h| Hypothesis {
            labels: h.labels,
            log_prob: h.log_prob,
            fused_score: h.fused,
            alignment: h.alignment,
        })
        .collect())
}
