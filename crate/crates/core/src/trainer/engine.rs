//! The training loop: per-worker SGD between BMUF synchronizations, batch
//! metrics, per-epoch checkpoints, and the three objectives.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::beam::{beam_search_nbest, BeamConfig, FusionConfig};
use crate::error::{Error, Result};
use crate::io::{save_nnlm, save_rnnt, Utterance};
use crate::mbr;
use crate::model::{ModelParams, Nnlm, RnntModel};
use crate::parallel::par_map;
use crate::tape::Tape;
use crate::trainer::bmuf::bmuf_sync;
use crate::trainer::config::{lr_at, Mode, TrainConfig};
use crate::trainer::data::build_pipeline;
use crate::trainer::eval::evaluate_cer;

/// One line of the machine-readable metrics log.
#[derive(Debug, Clone, Serialize)]
pub struct MetricsRecord {
    pub batch: usize,
    pub epoch: usize,
    pub mode: String,
    pub loss: f64,
    pub lr: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub avg_risk: Option<f64>,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub records: Vec<MetricsRecord>,
    pub epoch_losses: Vec<f64>,
    /// Dev CER after each epoch (only when a dev set was supplied).
    pub epoch_cer: Vec<f64>,
    pub checkpoints: Vec<PathBuf>,
}

struct BatchOutcome {
    grad: ModelParams,
    loss: f64,
    avg_risk: Option<f64>,
}

fn clip_gradient(grad: &mut ModelParams, clip: f64) {
    if clip <= 0.0 {
        return;
    }
    let sq: f64 = grad.iter().flat_map(|(_, t)| t.data()).map(|&v| (v as f64) * (v as f64)).sum();
    let norm = sq.sqrt();
    if norm > clip {
        grad.scale((clip / norm) as f32);
    }
}

fn mean_outcome(outcomes: Vec<Result<BatchOutcome>>) -> Result<BatchOutcome> {
    let mut iter = outcomes.into_iter();
    let first = iter.next().ok_or_else(|| Error::Contract("empty batch".into()))??;
    let mut grad = first.grad;
    let mut loss = first.loss;
    let mut risk_sum = first.avg_risk.unwrap_or(0.0);
    let has_risk = first.avg_risk.is_some();
    let mut n = 1usize;
    for o in iter {
        let o = o?;
        grad.axpy(1.0, &o.grad)?;
        loss += o.loss;
        risk_sum += o.avg_risk.unwrap_or(0.0);
        n += 1;
    }
    let inv = 1.0 / n as f64;
    grad.scale(inv as f32);
    Ok(BatchOutcome {
        grad,
        loss: loss * inv,
        avg_risk: if has_risk { Some(risk_sum * inv) } else { None },
    })
}

/// Generic BMUF training loop. `objective` maps (params, batch, seed) to an
/// averaged gradient plus telemetry; it must be deterministic in its inputs.
fn run_loop<F>(
    config: &TrainConfig,
    params: &mut ModelParams,
    batches: &[Vec<Utterance>],
    objective: &F,
    metrics_out: Option<&Path>,
    mut epoch_hook: impl FnMut(usize, &ModelParams, &mut TrainReport) -> Result<()>,
) -> Result<TrainReport>
where
    F: Fn(&ModelParams, &[Utterance], u64) -> Result<BatchOutcome> + Sync,
{
    let mut report = TrainReport::default();
    let mut metrics_file = match metrics_out {
        Some(p) => Some(std::io::BufWriter::new(std::fs::File::create(p)?)),
        None => None,
    };
    if config.epochs == 0 {
        return Ok(report);
    }
    let total = batches.len() * config.epochs;
    let mut worker_params: Vec<ModelParams> = vec![params.clone(); config.workers];
    let mut delta = params.zeros_like();
    let mode_label = config.mode.to_string();

    for epoch in 0..config.epochs {
        let mut epoch_loss_sum = 0.0;
        let round_size = config.workers * config.sync_period;
        for (round, round_batches) in batches.chunks(round_size).enumerate() {
            let round_start = epoch * batches.len() + round * round_size;
            let assignments: Vec<(usize, &[Vec<Utterance>])> = round_batches
                .chunks(config.sync_period)
                .enumerate()
                .collect();

            let results: Vec<Result<Vec<MetricsRecord>>> = std::thread::scope(|scope| {
                let mut handles = Vec::new();
                for ((w, chunk), wp) in assignments.iter().zip(worker_params.iter_mut()) {
                    let mode_label = &mode_label;
                    handles.push(scope.spawn(move || -> Result<Vec<MetricsRecord>> {
                        let mut records = Vec::new();
                        for (k, batch) in chunk.iter().enumerate() {
                            let index = round_start + w * config.sync_period + k;
                            let lr = lr_at(config, index, total)?;
                            let seed =
                                config.seed.wrapping_mul(0x9e3779b9).wrapping_add(index as u64);
                            let start = Instant::now();
                            let outcome = objective(wp, batch, seed)?;
                            if !outcome.loss.is_finite() {
                                return Err(Error::Diverged {
                                    batch: index,
                                    what: format!("{} loss is {}", mode_label, outcome.loss),
                                });
                            }
                            let mut grad = outcome.grad;
                            clip_gradient(&mut grad, config.grad_clip);
                            wp.axpy(-(lr as f32), &grad)?;
                            records.push(MetricsRecord {
                                batch: index,
                                epoch,
                                mode: mode_label.clone(),
                                loss: outcome.loss,
                                lr,
                                avg_risk: outcome.avg_risk,
                                wall_ms: start.elapsed().as_millis() as u64,
                            });
                        }
                        Ok(records)
                    }));
                }
                handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
            });

            let active = assignments.len();
            for r in results {
                for rec in r? {
                    epoch_loss_sum += rec.loss;
                    if let Some(f) = metrics_file.as_mut() {
                        let line = serde_json::to_string(&rec)
                            .map_err(|e| Error::Format(e.to_string()))?;
                        writeln!(f, "{}", line)?;
                    }
                    report.records.push(rec);
                }
            }
            bmuf_sync(
                params,
                &mut worker_params[..active],
                &mut delta,
                config.block_momentum,
                config.block_lr,
            )?;
            // idle workers rejoin from the fresh synchronized state
            let (synced, idle) = worker_params.split_at_mut(active);
            for wp in idle.iter_mut() {
                *wp = synced[0].clone();
            }
        }
        report.records.sort_by_key(|r| r.batch);
        report.epoch_losses.push(epoch_loss_sum / batches.len() as f64);
        if let Some(f) = metrics_file.as_mut() {
            f.flush()?;
        }
        epoch_hook(epoch, params, &mut report)?;
    }
    Ok(report)
}

fn dev_beam_config(config: &TrainConfig) -> BeamConfig {
    BeamConfig {
        beam: 4,
        nbest: 1,
        max_symbols_per_frame: 3,
        fusion: FusionConfig { lm_weight: 0.0, smoothing: config.smoothing },
    }
}

/// Transducer NLL training.
pub fn train_rnnt(
    config: &TrainConfig,
    model: &mut RnntModel,
    dataset: &[Utterance],
    dev: Option<&[Utterance]>,
    out_dir: Option<&Path>,
) -> Result<TrainReport> {
    if config.mode != Mode::Rnnt {
        return Err(Error::Config(format!("train_rnnt called with mode {}", config.mode)));
    }
    let batches = build_pipeline(dataset, config)?;
    let model_config = model.config.clone();
    let objective = |params: &ModelParams, batch: &[Utterance], seed: u64| -> Result<BatchOutcome> {
        let probe = RnntModel { config: model_config.clone(), params: params.clone() };
        let per_utt: Vec<Result<BatchOutcome>> = par_map(
            &batch.iter().enumerate().collect::<Vec<_>>(),
            |(i, utt)| {
                let mut tape = Tape::<f32>::new();
                let bound = probe.bind(&mut tape);
                let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(*i as u64));
                let mut rng_opt = Some(&mut rng);
                let h_enc = probe.encode(&mut tape, &bound, &utt.features, rng_opt.as_deref_mut())?;
                let loss =
                    mbr::rnnt_nll(&probe, &mut tape, &bound, h_enc, &utt.labels, &mut rng_opt)?;
                let value = tape.value(loss).data()[0] as f64;
                tape.backward(loss)?;
                Ok(BatchOutcome {
                    grad: bound.grads(&tape, &probe.params),
                    loss: value,
                    avg_risk: None,
                })
            },
        );
        mean_outcome(per_utt)
    };
    let metrics_path = out_dir.map(|d| d.join("metrics-rnnt.jsonl"));
    let mut params = model.params.clone();
    let dev_config = dev_beam_config(config);
    let result = run_loop(
        config,
        &mut params,
        &batches,
        &objective,
        metrics_path.as_deref(),
        |epoch, p, report| {
            let snapshot = RnntModel { config: model_config.clone(), params: p.clone() };
            if let Some(dir) = out_dir {
                let path = dir.join(format!("rnnt-epoch-{}.tmbr", epoch + 1));
                save_rnnt(&path, &snapshot)?;
                report.checkpoints.push(path);
            }
            if let Some(dev) = dev {
                report.epoch_cer.push(evaluate_cer(&snapshot, None, dev, &dev_config)?.cer);
            }
            Ok(())
        },
    )?;
    model.params = params;
    if let Some(dir) = out_dir {
        save_rnnt(&dir.join("rnnt-final.tmbr"), model)?;
    }
    Ok(result)
}

/// Minimum-risk fine-tuning with on-the-fly N-best generation (Eq. 17
/// regularization via `config.rnnt_weight`).
pub fn train_mbr(
    config: &TrainConfig,
    model: &mut RnntModel,
    lm: Option<&Nnlm>,
    dataset: &[Utterance],
    dev: Option<&[Utterance]>,
    out_dir: Option<&Path>,
) -> Result<TrainReport> {
    if config.mode != Mode::Mbr {
        return Err(Error::Config(format!("train_mbr called with mode {}", config.mode)));
    }
    let batches = build_pipeline(dataset, config)?;
    let model_config = model.config.clone();
    let search = BeamConfig {
        beam: config.beam,
        nbest: config.nbest,
        max_symbols_per_frame: 3,
        fusion: FusionConfig { lm_weight: config.lm_weight, smoothing: config.smoothing },
    };
    let objective = |params: &ModelParams, batch: &[Utterance], _seed: u64| -> Result<BatchOutcome> {
        let probe = RnntModel { config: model_config.clone(), params: params.clone() };
        let per_utt: Vec<Result<BatchOutcome>> = par_map(batch, |utt| {
            let h = probe.encode_eval(&utt.features)?;
            let nbest = beam_search_nbest(&probe, &h, lm, &search)?;
            let mut tape = Tape::<f32>::new();
            let bound = probe.bind(&mut tape);
            let (loss, outcome) = mbr::mbr_utterance_loss(
                &probe,
                &mut tape,
                &bound,
                &utt.features,
                &utt.labels,
                &nbest,
                config.rnnt_weight,
                None,
            )?;
            tape.backward(loss)?;
            Ok(BatchOutcome {
                grad: bound.grads(&tape, &probe.params),
                loss: outcome.expected_risk + config.rnnt_weight * outcome.rnnt_nll,
                avg_risk: Some(outcome.expected_risk),
            })
        });
        mean_outcome(per_utt)
    };
    let metrics_path = out_dir.map(|d| d.join("metrics-mbr.jsonl"));
    let mut params = model.params.clone();
    let dev_config = dev_beam_config(config);
    let result = run_loop(
        config,
        &mut params,
        &batches,
        &objective,
        metrics_path.as_deref(),
        |epoch, p, report| {
            let snapshot = RnntModel { config: model_config.clone(), params: p.clone() };
            if let Some(dir) = out_dir {
                let path = dir.join(format!("mbr-epoch-{}.tmbr", epoch + 1));
                save_rnnt(&path, &snapshot)?;
                report.checkpoints.push(path);
            }
            if let Some(dev) = dev {
                report.epoch_cer.push(evaluate_cer(&snapshot, None, dev, &dev_config)?.cer);
            }
            Ok(())
        },
    )?;
    model.params = params;
    if let Some(dir) = out_dir {
        save_rnnt(&dir.join("mbr-final.tmbr"), model)?;
    }
    Ok(result)
}

/// Next-symbol cross-entropy training of the external LM on the label text.
pub fn train_nnlm(
    config: &TrainConfig,
    model: &mut Nnlm,
    dataset: &[Utterance],
    out_dir: Option<&Path>,
) -> Result<TrainReport> {
    if config.mode != Mode::Nnlm {
        return Err(Error::Config(format!("train_nnlm called with mode {}", config.mode)));
    }
    let batches = build_pipeline(dataset, config)?;
    let model_config = model.config.clone();
    let objective = |params: &ModelParams, batch: &[Utterance], _seed: u64| -> Result<BatchOutcome> {
        let probe = Nnlm { config: model_config.clone(), params: params.clone() };
        let per_utt: Vec<Result<BatchOutcome>> = par_map(batch, |utt| {
            let window = utt.labels.len().min(config.bptt.max(1));
            let labels = &utt.labels[..window];
            if labels.is_empty() {
                return Ok(BatchOutcome {
                    grad: probe.params.zeros_like(),
                    loss: 0.0,
                    avg_risk: None,
                });
            }
            let mut tape = Tape::<f32>::new();
            let bound = probe.bind(&mut tape);
            let nll = probe.sequence_nll(&mut tape, &bound, labels)?;
            let value = tape.value(nll).data()[0] as f64 / labels.len() as f64;
            tape.backward(nll)?;
            let mut grad = bound.grads(&tape, &probe.params);
            grad.scale(1.0 / labels.len() as f32);
            Ok(BatchOutcome { grad, loss: value, avg_risk: None })
        });
        mean_outcome(per_utt)
    };
    let metrics_path = out_dir.map(|d| d.join("metrics-nnlm.jsonl"));
    let mut params = model.params.clone();
    let result = run_loop(
        config,
        &mut params,
        &batches,
        &objective,
        metrics_path.as_deref(),
        |epoch, p, report| {
            if let Some(dir) = out_dir {
                let snapshot = Nnlm { config: model_config.clone(), params: p.clone() };
                let path = dir.join(format!("nnlm-epoch-{}.tmbr", epoch + 1));
                save_nnlm(&path, &snapshot)?;
                report.checkpoints.push(path);
            }
            Ok(())
        },
    )?;
    model.params = params;
    if let Some(dir) = out_dir {
        save_nnlm(&dir.join("nnlm-final.tmbr"), model)?;
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{NnlmConfig, RnntConfig};
    use crate::trainer::data::synth_dataset;

    fn quick_config(mode: Mode) -> TrainConfig {
        TrainConfig {
            mode,
            epochs: 1,
            batch_size: 4,
            initial_lr: 1e-2,
            final_lr: 1e-3,
            // plain serial SGD: no block-momentum amplification
            block_momentum: 0.0,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn rnnt_training_reduces_loss_on_tiny_set() {
        let data = synth_dataset(4, 24, 3, 0.0, 11).unwrap();
        let mut model = RnntModel::init(RnntConfig::desk(4, 8)).unwrap();
        let mut config = quick_config(Mode::Rnnt);
        config.epochs = 4;
        config.initial_lr = 3e-3;
        config.final_lr = 1e-3;
        let report = train_rnnt(&config, &mut model, &data, None, None).unwrap();
        assert_eq!(report.epoch_losses.len(), 4);
        assert!(
            report.epoch_losses.last().unwrap() < &report.epoch_losses[0],
            "loss went {:?}",
            report.epoch_losses
        );
    }

    #[test]
    fn serial_training_is_deterministic() {
        let data = synth_dataset(4, 12, 3, 0.1, 3).unwrap();
        let config = quick_config(Mode::Rnnt);
        let run = || {
            let mut model = RnntModel::init(RnntConfig::desk(4, 8)).unwrap();
            let report = train_rnnt(&config, &mut model, &data, None, None).unwrap();
            (model.params, report)
        };
        let (p1, r1) = run();
        let (p2, r2) = run();
        assert_eq!(p1.max_abs_diff(&p2), 0.0);
        let l1: Vec<f64> = r1.records.iter().map(|r| r.loss).collect();
        let l2: Vec<f64> = r2.records.iter().map(|r| r.loss).collect();
        assert_eq!(l1, l2);
    }

    #[test]
    fn zero_epochs_leaves_model_unchanged() {
        let data = synth_dataset(4, 8, 3, 0.1, 3).unwrap();
        let mut model = RnntModel::init(RnntConfig::desk(4, 8)).unwrap();
        let before = model.params.clone();
        let config = TrainConfig { epochs: 0, ..quick_config(Mode::Rnnt) };
        let report = train_rnnt(&config, &mut model, &data, None, None).unwrap();
        assert_eq!(model.params.max_abs_diff(&before), 0.0);
        assert!(report.records.is_empty());
    }

    #[test]
    fn single_worker_bmuf_identity_matches_serial() {
        // workers=1, block_momentum=0, block_lr=1 must equal plain SGD
        let data = synth_dataset(4, 16, 3, 0.1, 5).unwrap();
        let serial_config = TrainConfig {
            block_momentum: 0.0,
            block_lr: 1.0,
            sync_period: 1,
            ..quick_config(Mode::Rnnt)
        };
        let sync5_config = TrainConfig { sync_period: 5, ..serial_config.clone() };
        let run = |config: &TrainConfig| {
            let mut model = RnntModel::init(RnntConfig::desk(4, 8)).unwrap();
            train_rnnt(config, &mut model, &data, None, None).unwrap();
            model.params
        };
        let a = run(&serial_config);
        let b = run(&sync5_config);
        assert!(a.max_abs_diff(&b) <= 1e-6, "diff {}", a.max_abs_diff(&b));
    }

    #[test]
    fn nnlm_training_reduces_perplexity() {
        // deterministic cyclic label text: far below the uniform entropy floor
        let data: Vec<crate::io::Utterance> = (0..40)
            .map(|i| crate::io::Utterance {
                id: format!("u{}", i),
                labels: (0..8).map(|k| 1 + (i + k) % 4).collect(),
                features: crate::Tensor::matrix(1, 1, vec![0.0]).unwrap(),
            })
            .collect();
        let mut lm = Nnlm::init(NnlmConfig::desk(4)).unwrap();
        let mut config = quick_config(Mode::Nnlm);
        config.epochs = 4;
        config.initial_lr = 0.05;
        config.final_lr = 0.02;
        let report = train_nnlm(&config, &mut lm, &data, None).unwrap();
        let first = report.epoch_losses[0];
        let last = *report.epoch_losses.last().unwrap();
        assert!(last < first, "per-symbol NLL went {:?}", report.epoch_losses);
    }

    #[test]
    fn mbr_smoke_run_emits_risk_telemetry() {
        let data = synth_dataset(4, 8, 3, 0.1, 19).unwrap();
        let mut model = RnntModel::init(RnntConfig::desk(4, 8)).unwrap();
        let config = quick_config(Mode::Mbr);
        let report = train_mbr(&config, &mut model, None, &data, None, None).unwrap();
        assert!(report.records.iter().all(|r| r.avg_risk.is_some()));
        assert!(report.records.iter().all(|r| r.loss.is_finite()));
    }

    #[test]
    fn wrong_mode_rejected() {
        let data = synth_dataset(4, 4, 3, 0.1, 19).unwrap();
        let mut model = RnntModel::init(RnntConfig::desk(4, 8)).unwrap();
        let config = quick_config(Mode::Mbr);
        assert!(train_rnnt(&config, &mut model, &data, None, None).is_err());
    }
}
