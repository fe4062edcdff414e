//! Finite-difference gradient checking and oracle-comparison suites.
//!
//! The analytic gradient is computed on an `f32` tape; the numeric side
//! re-evaluates the same function at `f64` with central differences, so the
//! difference quotient is not polluted by single-precision forward noise.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tape::{Tape, VarId};
use crate::tensor::{Real, Tensor};

/// A scalar-valued tensor function evaluable at any supported precision.
pub trait ScalarFn {
    fn eval<T: Real>(&self, tape: &mut Tape<T>, x: VarId) -> Result<VarId>;
}

/// Max over coordinates of `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F: ScalarFn>(f: &F, x: &Tensor<f32>, eps: f64) -> Result<f64> {
    if eps <= 0.0 {
        return Err(Error::Contract(format!("grad_check eps must be positive, got {}", eps)));
    }
    // analytic side
    let mut tape = Tape::<f32>::new();
    let xv = tape.leaf(x.clone(), true);
    let loss = f.eval(&mut tape, xv)?;
    if !tape.value(loss).is_scalar() {
        return Err(Error::NotScalar(tape.value(loss).shape().to_vec()));
    }
    tape.backward(loss)?;
    let analytic = tape
        .grad(xv)
        .unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));

    // numeric side, f64 re-evaluation
    let x64: Tensor<f64> = x.cast();
    let eval64 = |pt: &Tensor<f64>| -> Result<f64> {
        let mut t = Tape::<f64>::new();
        let xv = t.leaf(pt.clone(), false);
        let l = f.eval(&mut t, xv)?;
        Ok(t.value(l).data()[0])
    };
    let mut max_rel = 0.0f64;
    for i in 0..x64.numel() {
        let mut plus = x64.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x64.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval64(&plus)? - eval64(&minus)?) / (2.0 * eps);
        let a = analytic.data()[i] as f64;
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        max_rel = max_rel.max((a - numeric).abs() / denom);
    }
    Ok(max_rel)
}

/// Per-primitive finite-difference report, one `(name, max_rel_err)` entry
/// per checked op. Used by the `gradcheck` CLI command and the test suite.
pub fn primitive_grad_report(seed: u64) -> Result<Vec<(&'static str, f64)>> {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let randvec = |rng: &mut ChaCha8Rng, n: usize| -> Vec<f32> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    };

    let mut report = Vec::new();

    struct MatmulCase {
        w: Vec<f32>,
    }
    impl ScalarFn for MatmulCase {
        fn eval<T: Real>(&self, tape: &mut Tape<T>, x: VarId) -> Result<VarId> {
            let w = Tensor::matrix(3, 4, self.w.iter().map(|&v| T::from_f64(v as f64)).collect())?;
            let wv = tape.leaf(w, false);
            let y = tape.matmul(x, wv)?;
            let y = tape.tanh(y)?;
            tape.sum_all(y)
        }
    }
    let case = MatmulCase { w: randvec(&mut rng, 12) };
    report.push(("matmul", grad_check(&case, &Tensor::matrix(2, 3, randvec(&mut rng, 6))?, 1e-4)?));

    struct UnaryCase(&'static str);
    impl ScalarFn for UnaryCase {
        fn eval<T: Real>(&self, tape: &mut Tape<T>, x: VarId) -> Result<VarId> {
            let y = match self.0 {
                "sigmoid" => tape.sigmoid(x)?,
                "tanh" => tape.tanh(x)?,
                "relu" => tape.relu(x)?,
                "softmax" => tape.softmax(x)?,
                "log_softmax" => tape.log_softmax(x)?,
                other => return Err(Error::Contract(format!("unknown op {}", other))),
            };
            let sq = tape.element_mul(y, y)?;
            tape.sum_all(sq)
        }
    }
    for name in ["sigmoid", "tanh", "relu", "softmax", "log_softmax"] {
        // keep relu inputs away from the kink
        let data: Vec<f32> = (0..6)
            .map(|_| {
                let v: f32 = rng.gen_range(0.1..1.0);
                if rng.gen::<bool>() {
                    v
                } else {
                    -v
                }
            })
            .collect();
        report.push((name, grad_check(&UnaryCase(name), &Tensor::matrix(2, 3, data)?, 1e-4)?));
    }

    struct ElemMulCase;
    impl ScalarFn for ElemMulCase {
        fn eval<T: Real>(&self, tape: &mut Tape<T>, x: VarId) -> Result<VarId> {
            let a = tape.slice_cols(x, 0, 3)?;
            let b = tape.slice_cols(x, 3, 3)?;
            let y = tape.element_mul(a, b)?;
            tape.sum_all(y)
        }
    }
    report.push(("element_mul", grad_check(&ElemMulCase, &Tensor::matrix(2, 6, randvec(&mut rng, 12))?, 1e-4)?));

    struct ConcatAddCase;
    impl ScalarFn for ConcatAddCase {
        fn eval<T: Real>(&self, tape: &mut Tape<T>, x: VarId) -> Result<VarId> {
            let a = tape.slice_cols(x, 0, 2)?;
            let b = tape.slice_cols(x, 2, 2)?;
            let cat = tape.concat_cols(&[a, b])?;
            let y = tape.add(cat, x)?;
            let y = tape.sigmoid(y)?;
            tape.sum_all(y)
        }
    }
    report.push(("concat/add", grad_check(&ConcatAddCase, &Tensor::matrix(2, 4, randvec(&mut rng, 8))?, 1e-4)?));

    struct ConvCase {
        w: Vec<f32>,
    }
    impl ScalarFn for ConvCase {
        fn eval<T: Real>(&self, tape: &mut Tape<T>, x: VarId) -> Result<VarId> {
            let w = Tensor::matrix(6, 2, self.w.iter().map(|&v| T::from_f64(v as f64)).collect())?;
            let wv = tape.leaf(w, true);
            let y = tape.conv1d_context(x, wv, &[-1, 0, 1], 2)?;
            let y = tape.tanh(y)?;
            tape.sum_all(y)
        }
    }
    report.push((
        "conv1d_context",
        grad_check(&ConvCase { w: randvec(&mut rng, 12) }, &Tensor::matrix(5, 2, randvec(&mut rng, 10))?, 1e-4)?,
    ));

    struct CausalConvCase {
        w: Vec<f32>,
    }
    impl ScalarFn for CausalConvCase {
        fn eval<T: Real>(&self, tape: &mut Tape<T>, x: VarId) -> Result<VarId> {
            let w = Tensor::matrix(6, 2, self.w.iter().map(|&v| T::from_f64(v as f64)).collect())?;
            let wv = tape.leaf(w, false);
            let y = tape.conv1d_causal(x, wv, 3)?;
            let y = tape.sigmoid(y)?;
            tape.sum_all(y)
        }
    }
    report.push((
        "conv1d_causal",
        grad_check(&CausalConvCase { w: randvec(&mut rng, 12) }, &Tensor::matrix(5, 2, randvec(&mut rng, 10))?, 1e-4)?,
    ));

    struct LayerNormCase {
        // fixed random readout: sum(LN(x)^2) alone is nearly LN-invariant,
        // which would leave only eps-sized gradients to compare against
        r: Vec<f32>,
    }
    impl ScalarFn for LayerNormCase {
        fn eval<T: Real>(&self, tape: &mut Tape<T>, x: VarId) -> Result<VarId> {
            let cols = tape.value(x).cols();
            let gain = tape.leaf(Tensor::vector(vec![T::from_f64(1.3); cols]), false);
            let bias = tape.leaf(Tensor::vector(vec![T::from_f64(-0.2); cols]), false);
            let y = tape.layer_norm(x, gain, bias)?;
            let rows = tape.value(y).rows();
            let r = Tensor::matrix(rows, cols, self.r.iter().map(|&v| T::from_f64(v as f64)).collect())?;
            let rv = tape.leaf(r, false);
            let y = tape.element_mul(y, rv)?;
            let y = tape.tanh(y)?;
            tape.sum_all(y)
        }
    }
    report.push((
        "layer_norm",
        grad_check(&LayerNormCase { r: randvec(&mut rng, 12) }, &Tensor::matrix(3, 4, randvec(&mut rng, 12))?, 1e-4)?,
    ));

    struct EmbeddingCase;
    impl ScalarFn for EmbeddingCase {
        fn eval<T: Real>(&self, tape: &mut Tape<T>, x: VarId) -> Result<VarId> {
            let y = tape.embedding_lookup(x, &[0, 2, 1, 2])?;
            let y = tape.tanh(y)?;
            tape.sum_all(y)
        }
    }
    report.push(("embedding_lookup", grad_check(&EmbeddingCase, &Tensor::matrix(3, 3, randvec(&mut rng, 9))?, 1e-4)?));

    struct AttnCase {
        w: Vec<f32>,
    }
    impl ScalarFn for AttnCase {
        fn eval<T: Real>(&self, tape: &mut Tape<T>, x: VarId) -> Result<VarId> {
            let d = 4;
            let cast = |v: &[f32]| -> Vec<T> { v.iter().map(|&a| T::from_f64(a as f64)).collect() };
            let chunk = |i: usize| -> &[f32] { &self.w[i * d * d..(i + 1) * d * d] };
            let zeros = tape.leaf(Tensor::vector(vec![T::zero(); d]), false);
            let vars = crate::tape::AttentionVars {
                wq: tape.leaf(Tensor::matrix(d, d, cast(chunk(0)))?, false),
                bq: zeros,
                wk: tape.leaf(Tensor::matrix(d, d, cast(chunk(1)))?, false),
                bk: zeros,
                wv: tape.leaf(Tensor::matrix(d, d, cast(chunk(2)))?, false),
                bv: zeros,
                wo: tape.leaf(Tensor::matrix(d, d, cast(chunk(3)))?, false),
                bo: zeros,
            };
            let y = crate::tape::multi_head_attention(tape, x, &vars, 2, true, 0.0, None)?;
            let y = tape.tanh(y)?;
            tape.sum_all(y)
        }
    }
    report.push((
        "multi_head_attention",
        grad_check(&AttnCase { w: randvec(&mut rng, 64) }, &Tensor::matrix(3, 4, randvec(&mut rng, 12))?, 1e-4)?,
    ));

    struct LstmCase {
        w: Vec<f32>,
    }
    impl ScalarFn for LstmCase {
        fn eval<T: Real>(&self, tape: &mut Tape<T>, x: VarId) -> Result<VarId> {
            let (d, h) = (3, 2);
            let cast = |v: &[f32]| -> Vec<T> { v.iter().map(|&a| T::from_f64(a as f64)).collect() };
            let w_ih = tape.leaf(Tensor::matrix(d, 4 * h, cast(&self.w[..d * 4 * h]))?, false);
            let w_hh =
                tape.leaf(Tensor::matrix(h, 4 * h, cast(&self.w[d * 4 * h..(d + h) * 4 * h]))?, false);
            let bias = tape.leaf(Tensor::vector(vec![T::from_f64(0.1); 4 * h]), false);
            let h0 = tape.leaf(Tensor::matrix(1, h, vec![T::zero(); h])?, false);
            let c0 = tape.leaf(Tensor::matrix(1, h, vec![T::zero(); h])?, false);
            let (h1, c1) = crate::tape::lstm_cell(tape, x, h0, c0, w_ih, w_hh, bias)?;
            let (h2, _c2) = crate::tape::lstm_cell(tape, x, h1, c1, w_ih, w_hh, bias)?;
            tape.sum_all(h2)
        }
    }
    report.push((
        "lstm_cell",
        grad_check(&LstmCase { w: randvec(&mut rng, 40) }, &Tensor::matrix(1, 3, randvec(&mut rng, 3))?, 1e-4)?,
    ));

    Ok(report)
}

fn random_lattice(rng: &mut ChaCha8Rng) -> Result<crate::transducer::Lattice> {
    use crate::math::log_softmax_f64;
    let frames = rng.gen_range(1..=4usize);
    let labels = rng.gen_range(0..=3usize);
    let vocab = rng.gen_range(2..=5usize); // includes blank
    let reference: Vec<usize> = (0..labels).map(|_| rng.gen_range(1..vocab)).collect();
    let mut lp = Vec::with_capacity(frames * (labels + 1) * vocab);
    for _ in 0..frames * (labels + 1) {
        let logits: Vec<f64> = (0..vocab).map(|_| rng.gen_range(-2.0..2.0)).collect();
        lp.extend(log_softmax_f64(&logits));
    }
    crate::transducer::Lattice::new(frames, vocab, reference, lp)
}

/// Forward-backward vs brute-force path enumeration on `cases` random small
/// lattices; returns the max absolute log-domain discrepancy.
pub fn lattice_oracle_report(seed: u64, cases: usize) -> Result<f64> {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_abs = 0.0f64;
    for _ in 0..cases {
        let lat = random_lattice(&mut rng)?;
        let (nll, _) = crate::transducer::forward_backward_loss(&lat)?;
        let brute = crate::transducer::brute_force_loss(&lat)?;
        max_abs = max_abs.max((nll - brute).abs());
    }
    Ok(max_abs)
}

/// Finite-difference check of the lattice-loss gradient through a logits
/// parameterization (log-softmax rows feed the loss); returns max rel err
/// over `cases` random lattices.
pub fn transducer_grad_report(seed: u64, cases: usize) -> Result<f64> {
    use rand::SeedableRng;
    struct LatticeCase {
        frames: usize,
        vocab: usize,
        reference: Vec<usize>,
    }
    impl ScalarFn for LatticeCase {
        fn eval<T: Real>(&self, tape: &mut Tape<T>, x: VarId) -> Result<VarId> {
            let lp = tape.log_softmax(x)?;
            crate::transducer::loss_on_tape(tape, lp, self.frames, self.vocab, &self.reference)
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_rel = 0.0f64;
    for _ in 0..cases {
        let frames = rng.gen_range(1..=4usize);
        let labels = rng.gen_range(0..=3usize);
        let vocab = rng.gen_range(2..=5usize);
        let case = LatticeCase {
            frames,
            vocab,
            reference: (0..labels).map(|_| rng.gen_range(1..vocab)).collect(),
        };
        let rows = frames * (labels + 1);
        let logits: Vec<f32> = (0..rows * vocab).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let x = Tensor::matrix(rows, vocab, logits)?;
        max_rel = max_rel.max(grad_check(&case, &x, 1e-4)?);
    }
    Ok(max_rel)
}

/// Check the closed-form expected-risk gradient `gamma * (R - Rbar)` against
/// central finite differences of `sum(softmax(s) * R)` in f64; returns the
/// max rel err over `cases` random hypothesis spaces.
pub fn mbr_coefficient_report(seed: u64, cases: usize) -> Result<f64> {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = 1e-6;
    let expected_risk = |s: &[f64], r: &[f64]| -> f64 {
        let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = s.iter().map(|v| (v - m).exp()).sum();
        s.iter().zip(r).map(|(v, rk)| (v - m).exp() / z * rk).sum()
    };
    let mut max_rel = 0.0f64;
    for _ in 0..cases {
        let n = rng.gen_range(2..=4usize);
        let s: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..0.0)).collect();
        let r: Vec<f64> = (0..n).map(|_| rng.gen_range(0..6) as f64).collect();
        let space = crate::mbr::NBestSpace::new(s.clone(), r.clone())?;
        let analytic = space.gradient_coefficients();
        for i in 0..n {
            let mut plus = s.clone();
            plus[i] += eps;
            let mut minus = s.clone();
            minus[i] -= eps;
            let numeric = (expected_risk(&plus, &r) - expected_risk(&minus, &r)) / (2.0 * eps);
            // gradients here are O(1); a 1e-6 floor keeps FD roundoff noise
            // on exactly-zero coefficients (all-equal risks) out of the ratio
            let denom = analytic[i].abs().max(numeric.abs()).max(1e-6);
            max_rel = max_rel.max((analytic[i] - numeric).abs() / denom);
        }
    }
    Ok(max_rel)
}
