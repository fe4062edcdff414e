//! Minimum Bayes risk objective over N-best hypothesis spaces.
//!
//! The loss is the expected risk Σ γ(y)·R(y, y_ref) where γ renormalizes
//! hypothesis probabilities over the N-best space and the risk is edit
//! distance. Its exact gradient w.r.t. each hypothesis log-probability is
//! γ(y)·(R(y) − R̄), which is injected into the tape as a detached-coefficient
//! surrogate: Σ γ(y)(R(y) − R̄)·log p(y). A hypothesis's log-probability uses
//! the alignment recorded during search, so gradients flow to exactly the
//! output-distribution entries the search saw.

use rand_chacha::ChaCha8Rng;

use crate::beam::Hypothesis;
use crate::error::{Error, Result};
use crate::math;
use crate::model::{output_distribution, Bound, RnntModel};
use crate::tape::{Tape, VarId};
use crate::tensor::{Real, Tensor};
use crate::transducer;

/// Levenshtein distance (insertions, deletions, substitutions all cost 1).
pub fn edit_distance(a: &[usize], b: &[usize]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, &x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// A frozen hypothesis space: per-hypothesis log-probabilities and risks,
/// with the renormalized posterior γ and the expected risk R̄.
#[derive(Debug, Clone)]
pub struct NBestSpace {
    pub log_probs: Vec<f64>,
    pub risks: Vec<f64>,
    pub gamma: Vec<f64>,
    pub expected_risk: f64,
}

impl NBestSpace {
    pub fn new(log_probs: Vec<f64>, risks: Vec<f64>) -> Result<Self> {
        if log_probs.is_empty() || log_probs.len() != risks.len() {
            return Err(Error::Contract(format!(
                "n-best space needs matching non-empty lists, got {} log-probs / {} risks",
                log_probs.len(),
                risks.len()
            )));
        }
        if log_probs.iter().chain(&risks).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "nbest_space" });
        }
        let norm = math::log_sum_exp(log_probs.iter().copied());
        let gamma: Vec<f64> = log_probs.iter().map(|&lp| (lp - norm).exp()).collect();
        let expected_risk = gamma.iter().zip(&risks).map(|(g, r)| g * r).sum();
        Ok(NBestSpace { log_probs, risks, gamma, expected_risk })
    }

    pub fn from_hypotheses(hyps: &[Hypothesis], reference: &[usize]) -> Result<Self> {
        let log_probs = hyps.iter().map(|h| h.log_prob).collect();
        let risks = hyps.iter().map(|h| edit_distance(&h.labels, reference) as f64).collect();
        Self::new(log_probs, risks)
    }

    /// Expected risk, the MBR loss value.
    pub fn loss(&self) -> f64 {
        self.expected_risk
    }

    /// Exact gradient of the expected risk w.r.t. each hypothesis
    /// log-probability: γ(y)·(R(y) − R̄).
    pub fn gradient_coefficients(&self) -> Vec<f64> {
        self.gamma.iter().zip(&self.risks).map(|(g, r)| g * (r - self.expected_risk)).collect()
    }
}

/// Taped log-probability of one hypothesis via its recorded alignment: the
/// sum of output-distribution entries along the alignment's decisions.
pub fn hypothesis_log_prob<T: Real>(
    model: &RnntModel,
    tape: &mut Tape<T>,
    bound: &Bound,
    h_enc: VarId,
    hyp: &Hypothesis,
    rng: &mut Option<&mut ChaCha8Rng>,
) -> Result<VarId> {
    let h_dec = model.decode_prefix(tape, bound, &hyp.labels, rng.as_deref_mut())?;
    let pairs: Vec<(usize, usize)> = hyp.alignment.iter().map(|&(t, u, _)| (t, u)).collect();
    let logits = model.joint_pairs(tape, bound, h_enc, h_dec, &pairs)?;
    let log_probs = output_distribution(tape, logits, 1.0)?;
    let picks: Vec<(usize, usize)> =
        hyp.alignment.iter().enumerate().map(|(row, &(_, _, k))| (row, k)).collect();
    let weights = vec![1.0; picks.len()];
    tape.pick_weighted_sum(log_probs, &picks, &weights)
}

/// Taped transducer NLL of the reference for one utterance.
pub fn rnnt_nll<T: Real>(
    model: &RnntModel,
    tape: &mut Tape<T>,
    bound: &Bound,
    h_enc: VarId,
    reference: &[usize],
    rng: &mut Option<&mut ChaCha8Rng>,
) -> Result<VarId> {
    let h_dec = model.decode_prefix(tape, bound, reference, rng.as_deref_mut())?;
    let logits = model.joint_grid(tape, bound, h_enc, h_dec)?;
    let log_probs = output_distribution(tape, logits, 1.0)?;
    let frames = tape.value(h_enc).rows();
    transducer::loss_on_tape(tape, log_probs, frames, model.config.vocab_size + 1, reference)
}

/// Telemetry from one MBR utterance loss.
#[derive(Debug, Clone, Copy)]
pub struct MbrOutcome {
    pub expected_risk: f64,
    pub rnnt_nll: f64,
}

/// Build the regularized MBR training loss for one utterance on the tape:
/// the MBR surrogate plus `rnnt_weight` times the transducer NLL of the
/// reference. Backward on the returned scalar yields the exact expected-risk
/// gradient (hypothesis set and risks held fixed).
#[allow(clippy::too_many_arguments)]
pub fn mbr_utterance_loss<T: Real>(
    model: &RnntModel,
    tape: &mut Tape<T>,
    bound: &Bound,
    features: &Tensor<T>,
    reference: &[usize],
    nbest: &[Hypothesis],
    rnnt_weight: f64,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<(VarId, MbrOutcome)> {
    if nbest.is_empty() {
        return Err(Error::Contract("mbr loss needs a non-empty hypothesis space".into()));
    }
    let h_enc = model.encode(tape, bound, features, rng.as_deref_mut())?;
    let mut hyp_vars = Vec::with_capacity(nbest.len());
    for hyp in nbest {
        hyp_vars.push(hypothesis_log_prob(model, tape, bound, h_enc, hyp, &mut rng)?);
    }
    // posterior and coefficients from the taped values, detached
    let log_probs: Vec<f64> =
        hyp_vars.iter().map(|&v| tape.value(v).data()[0].as_f64()).collect();
    let risks: Vec<f64> =
        nbest.iter().map(|h| edit_distance(&h.labels, reference) as f64).collect();
    let space = NBestSpace::new(log_probs, risks)?;
    let coeffs = space.gradient_coefficients();

    let mut total: Option<VarId> = None;
    for (&v, &c) in hyp_vars.iter().zip(&coeffs) {
        let term = tape.scale(v, c)?;
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    let mut loss = total.expect("non-empty space");

    let mut nll_value = 0.0;
    if rnnt_weight > 0.0 {
        let nll = rnnt_nll(model, tape, bound, h_enc, reference, &mut rng)?;
        nll_value = tape.value(nll).data()[0].as_f64();
        let weighted = tape.scale(nll, rnnt_weight)?;
        loss = tape.add(loss, weighted)?;
    }
    Ok((loss, MbrOutcome { expected_risk: space.expected_risk, rnnt_nll: nll_value }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::beam::{beam_search_nbest, BeamConfig, FusionConfig};
    use crate::model::{ModelParams, RnntConfig};
    use rand::{Rng, SeedableRng};

    #[test]
    fn edit_distance_handcrafted() {
        assert_eq!(edit_distance(&[], &[]), 0);
        assert_eq!(edit_distance(&[1, 2, 3], &[1, 2, 3]), 0);
        assert_eq!(edit_distance(&[1, 2, 3], &[1, 3]), 1); // deletion
        assert_eq!(edit_distance(&[1, 2], &[1, 2, 3]), 1); // insertion
        assert_eq!(edit_distance(&[1, 2, 3], &[1, 4, 3]), 1); // substitution
        assert_eq!(edit_distance(&[1, 2, 3, 4], &[4, 3, 2, 1]), 4);
        assert_eq!(edit_distance(&[], &[5, 5, 5]), 3);
    }

    /// Exponential-time recursive definition as an independent oracle.
    fn edit_oracle(a: &[usize], b: &[usize]) -> usize {
        match (a.split_first(), b.split_first()) {
            (None, _) => b.len(),
            (_, None) => a.len(),
            (Some((&x, ar)), Some((&y, br))) => {
                let sub = edit_oracle(ar, br) + usize::from(x != y);
                let del = edit_oracle(ar, b) + 1;
                let ins = edit_oracle(a, br) + 1;
                sub.min(del).min(ins)
            }
        }
    }

    #[test]
    fn edit_distance_matches_recursive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let la = rng.gen_range(0..7);
            let lb = rng.gen_range(0..7);
            let a: Vec<usize> = (0..la).map(|_| rng.gen_range(1..4)).collect();
            let b: Vec<usize> = (0..lb).map(|_| rng.gen_range(1..4)).collect();
            assert_eq!(edit_distance(&a, &b), edit_oracle(&a, &b), "{:?} vs {:?}", a, b);
        }
    }

    #[test]
    fn loss_matches_hand_arithmetic() {
        // unnormalized probabilities (0.6, 0.2) with risks (0, 2):
        // gamma = (0.75, 0.25), expected risk = 0.5
        let space = NBestSpace::new(vec![0.6f64.ln(), 0.2f64.ln()], vec![0.0, 2.0]).unwrap();
        assert!((space.loss() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn gamma_is_shift_invariant() {
        let lp = vec![-1.0, -2.5, -0.3];
        let risks = vec![1.0, 2.0, 0.0];
        let a = NBestSpace::new(lp.clone(), risks.clone()).unwrap();
        let shifted: Vec<f64> = lp.iter().map(|v| v + 123.0).collect();
        let b = NBestSpace::new(shifted, risks).unwrap();
        for (x, y) in a.gamma.iter().zip(&b.gamma) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!((a.loss() - b.loss()).abs() < 1e-12);
    }

    #[test]
    fn equal_risks_give_exactly_zero_coefficients() {
        let space = NBestSpace::new(vec![-0.5, -1.0, -2.0], vec![3.0, 3.0, 3.0]).unwrap();
        for c in space.gradient_coefficients() {
            assert_eq!(c, 0.0);
        }
        assert!((space.loss() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn coefficients_sum_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let n = rng.gen_range(2..6);
            let lp: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..0.0)).collect();
            let risks: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..4.0)).collect();
            let space = NBestSpace::new(lp, risks).unwrap();
            let s: f64 = space.gradient_coefficients().iter().sum();
            assert!(s.abs() < 1e-12);
        }
    }

    fn tiny_setup() -> (RnntModel, Tensor<f32>, Vec<usize>, Vec<Hypothesis>) {
        let model = RnntModel::init(RnntConfig::desk(3, 4)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let features =
            Tensor::matrix(6, 4, (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let reference = vec![1usize, 2];
        let h = model.encode_eval(&features).unwrap();
        let config = BeamConfig {
            beam: 8,
            nbest: 4,
            max_symbols_per_frame: 2,
            fusion: FusionConfig { lm_weight: 0.0, smoothing: 0.8 },
        };
        let nbest = beam_search_nbest(&model, &h, None, &config).unwrap();
        assert!(nbest.len() >= 2);
        (model, features, reference, nbest)
    }

    /// Expected risk recomputed from scratch at a given parameter setting, in
    /// f64, with the hypothesis set frozen. Used as the FD oracle.
    fn expected_risk_f64(
        model: &RnntModel,
        params: &ModelParams,
        features: &Tensor<f32>,
        reference: &[usize],
        nbest: &[Hypothesis],
    ) -> f64 {
        let probe = RnntModel { config: model.config.clone(), params: params.clone() };
        let mut tape = Tape::<f64>::new();
        let bound = probe.bind(&mut tape);
        let feats: Tensor<f64> = features.cast();
        let h_enc = probe.encode(&mut tape, &bound, &feats, None).unwrap();
        let mut none = None;
        let lps: Vec<f64> = nbest
            .iter()
            .map(|hyp| {
                let v =
                    hypothesis_log_prob(&probe, &mut tape, &bound, h_enc, hyp, &mut none).unwrap();
                tape.value(v).data()[0]
            })
            .collect();
        let risks: Vec<f64> =
            nbest.iter().map(|h| edit_distance(&h.labels, reference) as f64).collect();
        NBestSpace::new(lps, risks).unwrap().loss()
    }

    #[test]
    fn mbr_gradient_matches_finite_differences_through_network() {
        let (model, features, reference, nbest) = tiny_setup();

        let mut tape = Tape::<f32>::new();
        let bound = model.bind(&mut tape);
        let feats = features.clone();
        let (loss, outcome) = mbr_utterance_loss(
            &model, &mut tape, &bound, &feats, &reference, &nbest, 0.0, None,
        )
        .unwrap();
        tape.backward(loss).unwrap();
        let grads = bound.grads(&tape, &model.params);
        assert!(outcome.expected_risk > 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let names: Vec<String> = model.params.names().cloned().collect();
        let eps = 1e-4;
        let mut checked = 0;
        for _ in 0..40 {
            let name = &names[rng.gen_range(0..names.len())];
            let idx = rng.gen_range(0..model.params.get(name).numel());
            let analytic = grads.get(name).data()[idx] as f64;
            let mut plus = model.params.clone();
            plus.get_mut(name).data_mut()[idx] += eps as f32;
            let mut minus = model.params.clone();
            minus.get_mut(name).data_mut()[idx] -= eps as f32;
            let fp = expected_risk_f64(&model, &plus, &features, &reference, &nbest);
            let fm = expected_risk_f64(&model, &minus, &features, &reference, &nbest);
            let numeric = (fp - fm) / (2.0 * eps);
            let denom = analytic.abs().max(numeric.abs());
            if denom < 1e-6 {
                continue; // both effectively zero
            }
            let rel = (analytic - numeric).abs() / denom;
            assert!(rel <= 1e-3, "{}[{}]: analytic {} vs numeric {} (rel {})", name, idx, analytic, numeric, rel);
            checked += 1;
        }
        assert!(checked >= 10, "only {} informative coordinates checked", checked);
    }

    #[test]
    fn equal_risk_space_gives_zero_mbr_gradient() {
        let (model, features, _, nbest) = tiny_setup();
        // reference chosen so every hypothesis has the same risk is hard to
        // arrange; instead freeze risks by using one hypothesis's labels as
        // reference for a two-hypothesis space with identical label lengths
        let same_len: Vec<Hypothesis> = nbest
            .iter()
            .filter(|h| h.labels.len() == nbest[0].labels.len())
            .cloned()
            .collect();
        // force equal risks by making the reference disjoint from the vocab
        // usage: with all risks equal, coefficients vanish and so must grads
        let reference = vec![3usize; nbest[0].labels.len() + 5];
        let risks: Vec<f64> = same_len
            .iter()
            .map(|h| edit_distance(&h.labels, &reference) as f64)
            .collect();
        if risks.windows(2).any(|w| w[0] != w[1]) {
            // fall back: synthetic space check only
            let space = NBestSpace::new(vec![-1.0, -2.0], vec![2.0, 2.0]).unwrap();
            assert!(space.gradient_coefficients().iter().all(|&c| c == 0.0));
            return;
        }
        let mut tape = Tape::<f32>::new();
        let bound = model.bind(&mut tape);
        let (loss, _) = mbr_utterance_loss(
            &model, &mut tape, &bound, &features, &reference, &same_len, 0.0, None,
        )
        .unwrap();
        tape.backward(loss).unwrap();
        let grads = bound.grads(&tape, &model.params);
        for (name, g) in grads.iter() {
            for &v in g.data() {
                assert!(v.abs() < 1e-7, "{} has gradient {}", name, v);
            }
        }
    }

    #[test]
    fn regularizer_adds_transducer_gradient() {
        let (model, features, reference, nbest) = tiny_setup();
        let run = |w: f64| -> (f64, ModelParams) {
            let mut tape = Tape::<f32>::new();
            let bound = model.bind(&mut tape);
            let (loss, out) = mbr_utterance_loss(
                &model, &mut tape, &bound, &features, &reference, &nbest, w, None,
            )
            .unwrap();
            tape.backward(loss).unwrap();
            (out.rnnt_nll, bound.grads(&tape, &model.params))
        };
        let (nll0, g0) = run(0.0);
        let (nll1, g1) = run(1.0);
        assert_eq!(nll0, 0.0);
        assert!(nll1 > 0.0);
        assert!(g0.max_abs_diff(&g1) > 1e-6, "regularizer did not change the gradient");
    }
}
