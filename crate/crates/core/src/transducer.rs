//! Transducer negative log-likelihood over the alignment lattice.
//!
//! States are `(t, u)` with `t` frames entered and `u` labels emitted. From
//! `(t, u)` the model either emits blank (advance to `(t+1, u)`) or the next
//! reference label (advance to `(t, u+1)`). Every alignment consumes exactly
//! `T'` blanks and `U` labels and terminates with the blank at `(T', U)`.
//! Forward/backward variables live in the log domain with a large negative
//! sentinel standing in for log(0).

use crate::error::{Error, Result};
use crate::math::{log_add, LOG_ZERO};
use crate::tape::{Tape, VarId};
use crate::tensor::{Real, Tensor};

/// Dense `T' x (U+1) x (V+1)` grid of output log-distributions plus the
/// reference label sequence. Entry `(t, u, k)` is the log-probability of
/// emitting symbol `k` at frame `t+1` after `u` reference labels. Blank is
/// symbol 0.
#[derive(Debug, Clone)]
pub struct Lattice {
    log_probs: Vec<f64>,
    frames: usize,
    vocab: usize, // V+1 including blank
    reference: Vec<usize>,
}

impl Lattice {
    pub fn new(frames: usize, vocab: usize, reference: Vec<usize>, log_probs: Vec<f64>) -> Result<Self> {
        if frames == 0 && !reference.is_empty() {
            return Err(Error::Contract("U > 0 requires at least one frame".into()));
        }
        if reference.iter().any(|&s| s == 0 || s >= vocab) {
            return Err(Error::Contract("reference must contain non-blank in-vocab symbols".into()));
        }
        let expected = frames * (reference.len() + 1) * vocab;
        if log_probs.len() != expected {
            return Err(Error::ShapeMismatch {
                op: "lattice",
                details: format!("{} log-probs, expected {}", log_probs.len(), expected),
            });
        }
        Ok(Lattice { log_probs, frames, vocab, reference })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn labels(&self) -> usize {
        self.reference.len()
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn reference(&self) -> &[usize] {
        &self.reference
    }

    pub fn log_probs(&self) -> &[f64] {
        &self.log_probs
    }

    pub fn log_probs_mut(&mut self) -> &mut [f64] {
        &mut self.log_probs
    }

    #[inline]
    fn lp(&self, t: usize, u: usize, k: usize) -> f64 {
        self.log_probs[(t * (self.reference.len() + 1) + u) * self.vocab + k]
    }

    #[inline]
    fn idx(&self, t: usize, u: usize, k: usize) -> usize {
        (t * (self.reference.len() + 1) + u) * self.vocab + k
    }

    /// Check that every `(t, u)` slice exp-sums to 1 within `tol`.
    pub fn check_normalized(&self, tol: f64) -> Result<()> {
        let u_max = self.reference.len() + 1;
        for t in 0..self.frames {
            for u in 0..u_max {
                let s: f64 = (0..self.vocab).map(|k| self.lp(t, u, k).exp()).sum();
                if (s - 1.0).abs() > tol {
                    return Err(Error::Contract(format!(
                        "lattice slice ({}, {}) exp-sums to {}",
                        t, u, s
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Forward-backward NLL and its gradient w.r.t. the log-probabilities.
///
/// `t` below is 1-based (frame index); storage is 0-based.
pub fn forward_backward_loss(lat: &Lattice) -> Result<(f64, Vec<f64>)> {
    let tf = lat.frames;
    let u_max = lat.labels();
    if tf == 0 {
        if u_max == 0 {
            // no frames, no labels: empty product, nll = 0
            return Ok((0.0, Vec::new()));
        }
        return Err(Error::Contract("U > 0 with T' = 0".into()));
    }
    let cols = u_max + 1;
    let mut alpha = vec![LOG_ZERO; tf * cols];
    alpha[0] = 0.0;
    for t in 0..tf {
        for u in 0..cols {
            if t == 0 && u == 0 {
                continue;
            }
            let mut v = LOG_ZERO;
            if t > 0 {
                v = log_add(v, alpha[(t - 1) * cols + u] + lat.lp(t - 1, u, 0));
            }
            if u > 0 {
                v = log_add(v, alpha[t * cols + u - 1] + lat.lp(t, u - 1, lat.reference[u - 1]));
            }
            alpha[t * cols + u] = v;
        }
    }
    let log_p = alpha[(tf - 1) * cols + u_max] + lat.lp(tf - 1, u_max, 0);
    if !log_p.is_finite() || log_p <= LOG_ZERO / 2.0 {
        return Err(Error::NonFinite { op: "forward_backward_loss" });
    }

    // beta(t, u): log-prob from state (t, u) to termination
    let mut beta = vec![LOG_ZERO; tf * cols];
    beta[(tf - 1) * cols + u_max] = lat.lp(tf - 1, u_max, 0);
    for t in (0..tf).rev() {
        for u in (0..cols).rev() {
            if t == tf - 1 && u == u_max {
                continue;
            }
            let mut v = LOG_ZERO;
            if t + 1 < tf {
                v = log_add(v, lat.lp(t, u, 0) + beta[(t + 1) * cols + u]);
            }
            if u < u_max {
                v = log_add(v, lat.lp(t, u, lat.reference[u]) + beta[t * cols + u + 1]);
            }
            beta[t * cols + u] = v;
        }
    }

    let mut grad = vec![0.0f64; lat.log_probs.len()];
    for t in 0..tf {
        for u in 0..cols {
            let a = alpha[t * cols + u];
            if a <= LOG_ZERO {
                continue;
            }
            // blank edge
            if t + 1 < tf {
                let occ = a + lat.lp(t, u, 0) + beta[(t + 1) * cols + u] - log_p;
                grad[lat.idx(t, u, 0)] -= occ.exp();
            } else if u == u_max {
                // terminating blank, occupied by every path
                let occ = a + lat.lp(t, u, 0) - log_p;
                grad[lat.idx(t, u, 0)] -= occ.exp();
            }
            // label edge
            if u < u_max {
                let sym = lat.reference[u];
                let occ = a + lat.lp(t, u, sym) + beta[t * cols + u + 1] - log_p;
                grad[lat.idx(t, u, sym)] -= occ.exp();
            }
        }
    }
    Ok((-log_p, grad))
}

/// Exact enumeration of all monotone alignments (test oracle). Refuses
/// instances with more than `10^5` paths.
pub fn brute_force_loss(lat: &Lattice) -> Result<f64> {
    let paths = path_count(lat.frames, lat.labels());
    if paths > 100_000 {
        return Err(Error::CombinatorialLimit(format!("{} paths", paths)));
    }
    if lat.frames == 0 {
        if lat.labels() == 0 {
            return Ok(0.0);
        }
        return Err(Error::Contract("U > 0 with T' = 0".into()));
    }
    let mut total = LOG_ZERO;
    // depth-first over (t, u) with running log-prob; t is 0-based frame here
    let mut stack = vec![(0usize, 0usize, 0.0f64)];
    while let Some((t, u, lp)) = stack.pop() {
        if t == lat.frames - 1 && u == lat.labels() {
            total = log_add(total, lp + lat.lp(t, u, 0));
            // may still emit labels? no: u == U already
        }
        if u < lat.labels() {
            stack.push((t, u + 1, lp + lat.lp(t, u, lat.reference[u])));
        }
        if t + 1 < lat.frames {
            stack.push((t + 1, u, lp + lat.lp(t, u, 0)));
        }
    }
    Ok(-total)
}

/// Number of monotone alignments: C(T' + U, U).
pub fn path_count(frames: usize, labels: usize) -> u128 {
    let mut c: u128 = 1;
    for i in 1..=labels as u128 {
        c = c * (frames as u128 + i) / i;
    }
    c
}

/// Splice the transducer loss into a tape: `log_probs_var` must hold the
/// `(T'*(U+1)) x (V+1)` log-distribution matrix. The forward value and the
/// closed-form gradient come from [`forward_backward_loss`].
pub fn loss_on_tape<T: Real>(
    tape: &mut Tape<T>,
    log_probs_var: VarId,
    frames: usize,
    vocab: usize,
    reference: &[usize],
) -> Result<VarId> {
    let v: &Tensor<T> = tape.value(log_probs_var);
    let lp: Vec<f64> = v.data().iter().map(|a| a.as_f64()).collect();
    let lat = Lattice::new(frames, vocab, reference.to_vec(), lp)?;
    let (nll, grad) = forward_backward_loss(&lat)?;
    tape.scalar_with_fixed_grad(log_probs_var, nll, grad)
}
