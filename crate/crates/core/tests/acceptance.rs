//! Acceptance suite: one test per criterion, each printing a pass/fail line.
//!
//! Run with `cargo test --test acceptance -- --nocapture` to see the lines.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tmbr_core::beam::{beam_search_nbest, shallow_fuse, BeamConfig, FusionConfig, Hypothesis};
use tmbr_core::checks::{lattice_oracle_report, mbr_coefficient_report, transducer_grad_report};
use tmbr_core::math::log_softmax_f64;
use tmbr_core::mbr::{edit_distance, hypothesis_log_prob, NBestSpace};
use tmbr_core::model::{RnntConfig, RnntModel};
use tmbr_core::tape::Tape;
use tmbr_core::trainer::{
    evaluate_cer, lr_at, synth_dataset, train_mbr, train_rnnt, Mode, TrainConfig,
};
use tmbr_core::transducer::{forward_backward_loss, Lattice};
use tmbr_core::Tensor;

fn pass(n: usize, what: &str) {
    println!("[PASS] criterion {}: {}", n, what);
}

struct FailGuard(usize, &'static str);
impl Drop for FailGuard {
    fn drop(&mut self) {
        if std::thread::panicking() {
            println!("[FAIL] criterion {}: {}", self.0, self.1);
        }
    }
}

#[test]
fn criterion_1_transducer_loss_oracle() {
    let guard = FailGuard(1, "transducer loss oracle equivalence");
    let start = std::time::Instant::now();
    let nll_diff = lattice_oracle_report(1, 200).unwrap();
    assert!(nll_diff <= 1e-5, "nll vs brute force diff {}", nll_diff);
    let grad_err = transducer_grad_report(1, 25).unwrap();
    assert!(grad_err <= 1e-3, "gradient rel err {}", grad_err);
    assert!(start.elapsed().as_secs() < 60, "took {:?}", start.elapsed());
    std::mem::forget(guard);
    pass(1, &format!("200 lattices, nll diff {:.2e}, grad rel err {:.2e}", nll_diff, grad_err));
}

/// Expected risk (Eq. 5) of a frozen hypothesis set evaluated from scratch
/// at f64, used as the finite-difference target.
fn expected_risk_f64(
    model: &RnntModel,
    features: &Tensor<f32>,
    hyps: &[Hypothesis],
    reference: &[usize],
) -> f64 {
    let mut tape = Tape::<f64>::new();
    let bound = model.bind(&mut tape);
    let feats: Tensor<f64> = features.cast();
    let h_enc = model
        .encode(&mut tape, &bound, &feats, None)
        .unwrap();
    let mut rng = None;
    let s: Vec<f64> = hyps
        .iter()
        .map(|h| {
            let v = hypothesis_log_prob(model, &mut tape, &bound, h_enc, h, &mut rng).unwrap();
            tape.value(v).data()[0]
        })
        .collect();
    let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = s.iter().map(|v| (v - m).exp()).sum();
    s.iter()
        .zip(hyps)
        .map(|(v, h)| (v - m).exp() / z * edit_distance(&h.labels, reference) as f64)
        .sum()
}

#[test]
fn criterion_2_mbr_gradient() {
    let guard = FailGuard(2, "MBR gradient correctness");
    let start = std::time::Instant::now();

    // 50 frozen hypothesis spaces: closed form vs finite differences
    let coeff_err = mbr_coefficient_report(2, 50).unwrap();
    assert!(coeff_err <= 1e-3, "coefficient rel err {}", coeff_err);

    // all-equal risks: exactly zero gradient
    for n in 2..=4 {
        let s: Vec<f64> = (0..n).map(|i| -(i as f64) - 0.5).collect();
        let space = NBestSpace::new(s, vec![3.0; n]).unwrap();
        assert!(space.gradient_coefficients().iter().all(|&c| c == 0.0));
    }

    // finite differences through the full network on frozen N-best sets
    let model = RnntModel::init(RnntConfig::desk(3, 8)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut max_rel = 0.0f64;
    for _ in 0..3 {
        let feats: Vec<f32> = (0..6 * 8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let features = Tensor::matrix(6, 8, feats).unwrap();
        let reference = vec![1, 2];
        let h = model.encode_eval(&features).unwrap();
        let search = BeamConfig {
            beam: 4,
            nbest: 3,
            max_symbols_per_frame: 2,
            fusion: FusionConfig { lm_weight: 0.0, smoothing: 1.0 },
        };
        let hyps = beam_search_nbest(&model, &h, None, &search).unwrap();

        // analytic gradient from the surrogate
        let mut tape = Tape::<f32>::new();
        let bound = model.bind(&mut tape);
        let (loss, _) = tmbr_core::mbr::mbr_utterance_loss(
            &model, &mut tape, &bound, &features, &reference, &hyps, 0.0, None,
        )
        .unwrap();
        tape.backward(loss).unwrap();
        let grads = bound.grads(&tape, &model.params);

        // FD through the full network on sampled coordinates
        let eps = 1e-4;
        for name in ["joint.wo", "enc.0.w", "dec.embed"] {
            let numel = model.params.get(name).numel();
            for k in 0..4 {
                let i = (k * 7919) % numel;
                let mut perturbed = model.clone();
                perturbed.params.get_mut(name).data_mut()[i] += eps as f32;
                let up = expected_risk_f64(&perturbed, &features, &hyps, &reference);
                let mut perturbed = model.clone();
                perturbed.params.get_mut(name).data_mut()[i] -= eps as f32;
                let down = expected_risk_f64(&perturbed, &features, &hyps, &reference);
                let numeric = (up - down) / (2.0 * eps);
                let analytic = grads.get(name).data()[i] as f64;
                let denom = analytic.abs().max(numeric.abs()).max(1e-4);
                max_rel = max_rel.max((analytic - numeric).abs() / denom);
            }
        }
    }
    assert!(max_rel <= 1e-3, "full-network FD rel err {}", max_rel);
    assert!(start.elapsed().as_secs() < 120, "took {:?}", start.elapsed());
    std::mem::forget(guard);
    pass(2, &format!("coefficient rel err {:.2e}, full-network FD rel err {:.2e}", coeff_err, max_rel));
}

#[test]
fn criterion_3_shallow_fusion() {
    let guard = FailGuard(3, "shallow fusion invariants");
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..1000 {
        let v = rng.gen_range(2..=6usize);
        let rnnt: Vec<f64> = {
            let logits: Vec<f64> = (0..v + 1).map(|_| rng.gen_range(-3.0..3.0)).collect();
            log_softmax_f64(&logits)
        };
        let lm: Vec<f64> = {
            let logits: Vec<f64> = (0..v).map(|_| rng.gen_range(-3.0..3.0)).collect();
            log_softmax_f64(&logits)
        };
        for &lambda in &[0.0, 0.1, 0.5, 1.0] {
            let fused = shallow_fuse(&rnnt, &lm, lambda).unwrap();
            let sum: f64 = fused.iter().map(|&x| x.exp()).sum();
            assert!((sum - 1.0).abs() <= 1e-6, "sum {} at lambda {}", sum, lambda);
            assert_eq!(fused[0].to_bits(), rnnt[0].to_bits(), "blank not bit-preserved");
            if lambda == 0.0 {
                assert_eq!(fused, rnnt, "lambda=0 not identity");
            }
        }
    }
    // worked example
    let rnnt = [0.5f64.ln(), 0.3f64.ln(), 0.2f64.ln()];
    let lm = [0.5f64.ln(), 0.5f64.ln()];
    let fused = shallow_fuse(&rnnt, &lm, 0.5).unwrap();
    let expect = [0.5, 0.27524, 0.22476];
    for (f, e) in fused.iter().zip(expect) {
        assert!((f.exp() - e).abs() <= 1e-4, "{} vs {}", f.exp(), e);
    }
    std::mem::forget(guard);
    pass(3, "1000 distributions x 4 lambdas normalized, blank bit-exact, worked example matches");
}

/// Exact sequence log-probability by alignment-lattice dynamic programming.
fn lattice_sequence_score(model: &RnntModel, h_enc: &Tensor<f32>, y: &[usize]) -> f64 {
    let vocab = model.config.vocab_size + 1;
    let mut states = vec![model.decoder_start().unwrap()];
    for &sym in y {
        states.push(model.decoder_step(states.last().unwrap(), sym).unwrap());
    }
    let mut lp = Vec::new();
    for t in 0..h_enc.rows() {
        for s in &states {
            let logits: Vec<f64> =
                model.joint_eval(h_enc.row(t), &s.out).iter().map(|&v| v as f64).collect();
            lp.extend(log_softmax_f64(&logits));
        }
    }
    let lat = Lattice::new(h_enc.rows(), vocab, y.to_vec(), lp).unwrap();
    -forward_backward_loss(&lat).unwrap().0
}

#[test]
fn criterion_4_beam_search_oracle() {
    let guard = FailGuard(4, "beam-search oracle and monotonicity");
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let model = RnntModel::init(RnntConfig::desk(2, 8)).unwrap();
    let feats: Vec<f32> = (0..8 * 8).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let features = Tensor::matrix(8, 8, feats).unwrap();
    let h = model.encode_eval(&features).unwrap();

    // full enumeration of label sequences up to length 2 over 2 symbols
    let mut candidates: Vec<Vec<usize>> = vec![vec![]];
    for a in 1..=2usize {
        candidates.push(vec![a]);
        for b in 1..=2usize {
            candidates.push(vec![a, b]);
        }
    }
    let mut exact: Vec<(Vec<usize>, f64)> = candidates
        .into_iter()
        .map(|y| {
            let s = lattice_sequence_score(&model, &h, &y);
            (y, s)
        })
        .collect();
    exact.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());

    let wide = BeamConfig {
        beam: 256,
        nbest: 256,
        max_symbols_per_frame: 3,
        fusion: FusionConfig { lm_weight: 0.0, smoothing: 1.0 },
    };
    let hyps = beam_search_nbest(&model, &h, None, &wide).unwrap();
    let short: Vec<&Hypothesis> = hyps.iter().filter(|h| h.labels.len() <= 2).collect();
    for (rank, (y, score)) in exact.iter().enumerate() {
        assert_eq!(&short[rank].labels, y, "ranking mismatch at {}", rank);
        assert!((short[rank].log_prob - score).abs() <= 1e-5);
    }

    // beam monotonicity: best score never degrades as the beam widens
    let mut prev = f64::NEG_INFINITY;
    for b in [1usize, 2, 4, 8] {
        let cfg = BeamConfig { beam: b, nbest: 1, ..wide };
        let best = beam_search_nbest(&model, &h, None, &cfg).unwrap()[0].fused_score;
        assert!(best >= prev - 1e-12, "beam {} score {} below {}", b, best, prev);
        prev = best;
    }
    std::mem::forget(guard);
    pass(4, "wide beam equals full enumeration; monotone over beams 1,2,4,8");
}

#[test]
fn criterion_5_lr_schedule() {
    let guard = FailGuard(5, "log-linear learning-rate schedule");
    let config = TrainConfig::default();
    assert_eq!(lr_at(&config, 0, 1000).unwrap(), 1e-3);
    let end = lr_at(&config, 1000, 1000).unwrap();
    assert!((end - 1e-4).abs() < 1e-19, "endpoint {}", end);
    let mid = lr_at(&config, 500, 1000).unwrap();
    assert!((mid - 3.1623e-4).abs() <= 1e-8, "midpoint {}", mid);
    let (a, b, c) = (
        lr_at(&config, 100, 1000).unwrap().ln(),
        lr_at(&config, 300, 1000).unwrap().ln(),
        lr_at(&config, 500, 1000).unwrap().ln(),
    );
    assert!(((b - a) - (c - b)).abs() <= 1e-9, "log-linearity violated");
    std::mem::forget(guard);
    pass(5, "endpoints exact, midpoint 3.1623e-4, three-point log-linear");
}

#[test]
fn criterion_6_bmuf_degenerate_equivalence() {
    let guard = FailGuard(6, "BMUF degenerate equivalence");
    // 200 utterances / batch 4 = 50 batches in one epoch
    let data = synth_dataset(6, 200, 2, 0.1, 6).unwrap();
    let base = TrainConfig {
        mode: Mode::Rnnt,
        epochs: 1,
        batch_size: 4,
        workers: 1,
        block_momentum: 0.0,
        block_lr: 1.0,
        sync_period: 1,
        ..TrainConfig::default()
    };
    let run = |config: &TrainConfig| {
        let mut model = RnntModel::init(RnntConfig::desk(6, 8)).unwrap();
        train_rnnt(config, &mut model, &data, None, None).unwrap();
        model.params
    };
    let serial = run(&base);
    let synced = run(&TrainConfig { sync_period: 50, ..base.clone() });
    let diff = serial.max_abs_diff(&synced) as f64;
    assert!(diff <= 1e-6, "trajectory diff {}", diff);

    // multi-worker: all workers bit-identical after a sync
    let mut global = RnntModel::init(RnntConfig::desk(6, 8)).unwrap().params;
    let mut workers = vec![
        RnntModel::init(RnntConfig { init_seed: 7, ..RnntConfig::desk(6, 8) }).unwrap().params,
        RnntModel::init(RnntConfig { init_seed: 8, ..RnntConfig::desk(6, 8) }).unwrap().params,
        RnntModel::init(RnntConfig { init_seed: 9, ..RnntConfig::desk(6, 8) }).unwrap().params,
    ];
    let mut delta = global.zeros_like();
    tmbr_core::trainer::bmuf_sync(&mut global, &mut workers, &mut delta, 0.9, 1.0).unwrap();
    for w in &workers[1..] {
        assert_eq!(w.max_abs_diff(&workers[0]), 0.0, "workers diverged after sync");
    }
    std::mem::forget(guard);
    pass(6, &format!("50-batch serial trajectory diff {:.2e}; workers bit-identical", diff));
}

#[test]
fn criterion_7_end_to_end_desk_scale() {
    let guard = FailGuard(7, "end-to-end desk-scale pattern reproduction");
    let start = std::time::Instant::now();
    let corpus = synth_dataset(16, 2000, 3, 0.1, 1).unwrap();
    // held-out dev slice from the same corpus (same symbol embeddings)
    let (train, dev) = corpus.split_at(1800);

    // (a) transducer training: dev CER non-increasing within noise
    let rnnt_config = TrainConfig {
        mode: Mode::Rnnt,
        epochs: 5,
        batch_size: 2,
        initial_lr: 0.02,
        final_lr: 0.005,
        grad_clip: 0.0,
        block_momentum: 0.0,
        smoothing: 0.8,
        ..TrainConfig::default()
    };
    let mut model = RnntModel::init(RnntConfig::desk(16, 8)).unwrap();
    let report = train_rnnt(&rnnt_config, &mut model, train, Some(dev), None).unwrap();
    println!("  rnnt dev CER by epoch: {:?}", report.epoch_cer);
    assert_eq!(report.epoch_cer.len(), 5);
    for w in report.epoch_cer.windows(2) {
        assert!(w[1] <= w[0] + 0.5, "dev CER increased beyond noise: {:?}", report.epoch_cer);
    }

    // (b) softmax smoothing helps (or at least does not hurt beyond noise)
    let decode = |beta: f64| {
        let cfg = BeamConfig {
            beam: 4,
            nbest: 1,
            max_symbols_per_frame: 3,
            fusion: FusionConfig { lm_weight: 0.0, smoothing: beta },
        };
        evaluate_cer(&model, None, dev, &cfg).unwrap().cer
    };
    let cer_smooth = decode(0.8);
    let cer_plain = decode(1.0);
    println!("  decode CER: beta=0.8 {:.3}, beta=1.0 {:.3}", cer_smooth, cer_plain);
    assert!(cer_smooth <= cer_plain + 0.5, "smoothing hurt: {} vs {}", cer_smooth, cer_plain);

    // (c) MBR fine-tune: average N-best risk falls >= 20%, dev CER holds
    let cer_before = *report.epoch_cer.last().unwrap();
    let mbr_config = TrainConfig {
        mode: Mode::Mbr,
        epochs: 1,
        block_momentum: 0.0,
        initial_lr: 1e-4,
        final_lr: 1e-5,
        beam: 2,
        nbest: 2,
        smoothing: 0.8,
        ..TrainConfig::default()
    };
    let mbr_report =
        train_mbr(&mbr_config, &mut model, None, train, Some(dev), None).unwrap();
    let risks: Vec<f64> = mbr_report.records.iter().filter_map(|r| r.avg_risk).collect();
    let window = (risks.len() / 10).max(1);
    let first: f64 = risks[..window].iter().sum::<f64>() / window as f64;
    let last: f64 = risks[risks.len() - window..].iter().sum::<f64>() / window as f64;
    println!("  avg N-best risk: first window {:.4}, last window {:.4}", first, last);
    assert!(last <= 0.8 * first, "risk fell only {:.1}%", (1.0 - last / first) * 100.0);
    let cer_after = *mbr_report.epoch_cer.last().unwrap();
    println!("  dev CER: before MBR {:.3}, after MBR {:.3}", cer_before, cer_after);
    assert!(cer_after <= cer_before + 0.5, "MBR regressed CER {} -> {}", cer_before, cer_after);

    assert!(start.elapsed().as_secs() < 1800, "took {:?}", start.elapsed());
    std::mem::forget(guard);
    pass(
        7,
        &format!(
            "CER {:?} -> beta0.8 {:.2} vs beta1.0 {:.2}; risk {:.3}->{:.3}; MBR CER {:.2}",
            report.epoch_cer, cer_smooth, cer_plain, first, last, cer_after
        ),
    );
}

#[test]
fn criterion_8_cer_metric() {
    let guard = FailGuard(8, "CER metric exactness");
    let d1 = edit_distance(&[1, 2, 3, 4], &[1, 9, 3, 4]);
    let d2 = edit_distance(&[1, 2, 3, 4, 5, 6], &[1, 2, 9, 9, 5, 6]);
    assert_eq!((d1, d2), (1, 2));
    let cer = (d1 + d2) as f64 / (4 + 6) as f64 * 100.0;
    assert_eq!(cer, 30.0);
    std::mem::forget(guard);
    pass(8, "distances {1,2} over lengths {4,6} give exactly 30.0");
}
