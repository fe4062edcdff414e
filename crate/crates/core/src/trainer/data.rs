//! Synthetic dataset generation and the batching pipeline.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::io::Utterance;
use crate::tensor::Tensor;
use crate::trainer::config::TrainConfig;

/// Feature dimensionality of the synthetic corpus.
pub const SYNTH_FEATURE_DIM: usize = 8;

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Generate a labeled corpus. Each symbol owns a fixed random embedding in
/// `[-1, 1]^8` (drawn once from the seed); an utterance's features repeat its
/// label embeddings `frames_per_label` times each, plus N(0, sigma^2) noise.
/// Label sequences are uniform over symbols with lengths uniform in 2..=12.
pub fn synth_dataset(
    vocab_size: usize,
    n_utts: usize,
    frames_per_label: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<Vec<Utterance>> {
    if vocab_size < 2 {
        return Err(Error::Config(format!("synthetic vocab needs >= 2 symbols, got {}", vocab_size)));
    }
    if frames_per_label == 0 {
        return Err(Error::Config("frames_per_label must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let embeddings: Vec<Vec<f32>> = (0..vocab_size)
        .map(|_| (0..SYNTH_FEATURE_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let mut utts = Vec::with_capacity(n_utts);
    for i in 0..n_utts {
        let len = rng.gen_range(2..=12usize);
        let labels: Vec<usize> = (0..len).map(|_| rng.gen_range(1..=vocab_size)).collect();
        let rows = len * frames_per_label;
        let mut data = Vec::with_capacity(rows * SYNTH_FEATURE_DIM);
        for &l in &labels {
            for _ in 0..frames_per_label {
                for &e in &embeddings[l - 1] {
                    let noise = if noise_sigma > 0.0 { gaussian(&mut rng) * noise_sigma } else { 0.0 };
                    data.push(e + noise as f32);
                }
            }
        }
        utts.push(Utterance {
            id: format!("utt{:05}", i),
            labels,
            features: Tensor::matrix(rows, SYNTH_FEATURE_DIM, data)?,
        });
    }
    Ok(utts)
}

/// The training pipeline: drop over-long utterances, sort by length, group
/// into fixed-size batches, then shuffle the batch order with the seed.
pub fn build_pipeline(dataset: &[Utterance], config: &TrainConfig) -> Result<Vec<Vec<Utterance>>> {
    let max = config.max_frames();
    let mut kept: Vec<Utterance> =
        dataset.iter().filter(|u| u.features.rows() <= max).cloned().collect();
    if kept.is_empty() {
        return Err(Error::EmptyDataset);
    }
    kept.sort_by(|a, b| a.features.rows().cmp(&b.features.rows()).then(a.id.cmp(&b.id)));
    let mut batches: Vec<Vec<Utterance>> =
        kept.chunks(config.batch_size).map(|c| c.to_vec()).collect();
    // Fisher-Yates over batch order
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    for i in (1..batches.len()).rev() {
        let j = rng.gen_range(0..=i);
        batches.swap(i, j);
    }
    Ok(batches)
}
