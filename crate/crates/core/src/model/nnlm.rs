//! External LSTM language model over the non-blank symbols.
//!
//! The LM's input space has one extra token, start-of-sentence; its output
//! layer also carries an SOS column which is masked before normalization, so
//! scores form a proper distribution over the V real symbols.

use crate::error::{Error, Result};
use crate::math;
use crate::model::config::NnlmConfig;
use crate::model::params::{Bound, ModelParams};
use crate::model::rnnt::{init_params, InitKind};
use crate::tape::{lstm_cell, Tape, VarId};
use crate::tensor::{Real, Tensor};

/// Sentinel for start-of-sentence in label histories handed to the LM.
pub const SOS: usize = usize::MAX;

fn nnlm_param_shapes(config: &NnlmConfig) -> Vec<(String, Vec<usize>, InitKind)> {
    let v = config.vocab_size;
    let mut out = Vec::new();
    out.push(("nnlm.embed".to_string(), vec![v + 1, config.embed_dim], InitKind::Embedding));
    let mut dim = config.embed_dim;
    for (i, &h) in config.hidden.iter().enumerate() {
        out.push((format!("nnlm.{}.w_ih", i), vec![dim, 4 * h], InitKind::FanIn(dim)));
        out.push((format!("nnlm.{}.w_hh", i), vec![h, 4 * h], InitKind::FanIn(h)));
        out.push((format!("nnlm.{}.b", i), vec![4 * h], InitKind::Zero));
        dim = h;
    }
    if let Some(p) = config.projection {
        out.push(("nnlm.proj.w".to_string(), vec![dim, p], InitKind::FanIn(dim)));
        out.push(("nnlm.proj.b".to_string(), vec![p], InitKind::Zero));
        dim = p;
    }
    out.push(("nnlm.out.w".to_string(), vec![dim, v + 1], InitKind::FanIn(dim)));
    out.push(("nnlm.out.b".to_string(), vec![v + 1], InitKind::Zero));
    out
}

#[derive(Debug, Clone)]
pub struct Nnlm {
    pub config: NnlmConfig,
    pub params: ModelParams,
}

impl Nnlm {
    pub fn init(config: NnlmConfig) -> Result<Self> {
        if config.vocab_size < 1 || config.hidden.is_empty() {
            return Err(Error::Config("nnlm needs vocab_size >= 1 and at least one layer".into()));
        }
        let params = init_params(&nnlm_param_shapes(&config), config.init_seed);
        Ok(Nnlm { config, params })
    }

    pub fn from_parts(config: NnlmConfig, params: ModelParams) -> Result<Self> {
        let expected = nnlm_param_shapes(&config);
        if expected.len() != params.len()
            || !expected.iter().zip(params.names()).all(|((n, ..), m)| n == m)
        {
            return Err(Error::Format("checkpoint parameters do not match nnlm config".into()));
        }
        Ok(Nnlm { config, params })
    }

    pub fn param_count(config: &NnlmConfig) -> usize {
        nnlm_param_shapes(config)
            .iter()
            .map(|(_, s, _)| s.iter().product::<usize>())
            .sum()
    }

    pub fn bind<T: Real>(&self, tape: &mut Tape<T>) -> Bound {
        Bound::bind(&self.params, tape)
    }

    fn embed_index(&self, symbol: usize) -> Result<usize> {
        if symbol == SOS {
            Ok(self.config.vocab_size)
        } else if symbol >= 1 && symbol <= self.config.vocab_size {
            Ok(symbol - 1)
        } else {
            Err(Error::Contract(format!(
                "language model history must be non-blank symbols or SOS, got {}",
                symbol
            )))
        }
    }

    /// Taped per-step log-distributions for a label sequence. Row `u` of the
    /// result is `log p(. | SOS, labels[..u])` over the V real symbols, so the
    /// sequence NLL picks entry `labels[u] - 1` from row `u`.
    pub fn sequence_log_probs<T: Real>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        labels: &[usize],
    ) -> Result<Vec<VarId>> {
        if labels.is_empty() {
            return Err(Error::Contract("empty label sequence for the language model".into()));
        }
        let mut inputs = Vec::with_capacity(labels.len());
        inputs.push(self.embed_index(SOS)?);
        for &l in &labels[..labels.len() - 1] {
            inputs.push(self.embed_index(l)?);
        }
        // validate the final target symbol too
        self.embed_index(labels[labels.len() - 1])?;

        let embed = bound.var("nnlm.embed");
        let mut h: Vec<VarId> = Vec::new();
        let mut c: Vec<VarId> = Vec::new();
        for &hid in &self.config.hidden {
            h.push(tape.leaf(Tensor::matrix(1, hid, vec![T::zero(); hid])?, false));
            c.push(tape.leaf(Tensor::matrix(1, hid, vec![T::zero(); hid])?, false));
        }
        let mut rows = Vec::with_capacity(labels.len());
        for &idx in &inputs {
            let mut x = tape.embedding_lookup(embed, &[idx])?;
            for (i, _) in self.config.hidden.iter().enumerate() {
                let w_ih = bound.var(&format!("nnlm.{}.w_ih", i));
                let w_hh = bound.var(&format!("nnlm.{}.w_hh", i));
                let b = bound.var(&format!("nnlm.{}.b", i));
                let (h_new, c_new) = lstm_cell(tape, x, h[i], c[i], w_ih, w_hh, b)?;
                h[i] = h_new;
                c[i] = c_new;
                x = h_new;
            }
            if self.config.projection.is_some() {
                x = tape.matmul(x, bound.var("nnlm.proj.w"))?;
                x = tape.add(x, bound.var("nnlm.proj.b"))?;
            }
            let mut logits = tape.matmul(x, bound.var("nnlm.out.w"))?;
            logits = tape.add(logits, bound.var("nnlm.out.b"))?;
            // mask the SOS column: it is never a valid prediction
            let real = tape.slice_cols(logits, 0, self.config.vocab_size)?;
            rows.push(tape.log_softmax(real)?);
        }
        Ok(rows)
    }

    /// Taped sequence negative log-likelihood (sum over positions).
    pub fn sequence_nll<T: Real>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        labels: &[usize],
    ) -> Result<VarId> {
        let rows = self.sequence_log_probs(tape, bound, labels)?;
        let mut total: Option<VarId> = None;
        for (row, &l) in rows.iter().zip(labels) {
            let idx = self.embed_index(l)?;
            let step = tape.pick_weighted_sum(*row, &[(0, idx)], &[-1.0])?;
            total = Some(match total {
                Some(t) => tape.add(t, step)?,
                None => step,
            });
        }
        Ok(total.expect("labels non-empty"))
    }

    // ── untaped incremental path ─────────────────────────────────────

    /// State after consuming SOS only.
    pub fn start(&self) -> NnlmState {
        let mut state = NnlmState {
            h: self.config.hidden.iter().map(|&n| vec![0.0; n]).collect(),
            c: self.config.hidden.iter().map(|&n| vec![0.0; n]).collect(),
            log_probs: Vec::new(),
        };
        self.advance(&mut state, self.config.vocab_size);
        state
    }

    /// Extend the history by one non-blank symbol.
    pub fn step(&self, state: &NnlmState, symbol: usize) -> Result<NnlmState> {
        if symbol == SOS || symbol == 0 || symbol > self.config.vocab_size {
            return Err(Error::Contract(format!(
                "language model step expects a non-blank symbol, got {}",
                symbol
            )));
        }
        let mut next = state.clone();
        self.advance(&mut next, symbol - 1);
        Ok(next)
    }

    fn advance(&self, state: &mut NnlmState, embed_idx: usize) {
        let p = &self.params;
        let embed = p.get("nnlm.embed");
        let mut x: Vec<f32> = embed.row(embed_idx).to_vec();
        let mut dim = self.config.embed_dim;
        for (i, &hid) in self.config.hidden.iter().enumerate() {
            let w_ih = p.get(&format!("nnlm.{}.w_ih", i));
            let w_hh = p.get(&format!("nnlm.{}.w_hh", i));
            let b = p.get(&format!("nnlm.{}.b", i));
            let mut gates = math::affine(&x, w_ih.data(), Some(b.data()), dim, 4 * hid);
            let hg = math::affine(&state.h[i], w_hh.data(), None, hid, 4 * hid);
            math::add_in_place(&mut gates, &hg);
            let (h, c) = (&mut state.h[i], &mut state.c[i]);
            for j in 0..hid {
                let ig = math::sigmoid(gates[j]);
                let fg = math::sigmoid(gates[hid + j]);
                let gg = gates[2 * hid + j].tanh();
                let og = math::sigmoid(gates[3 * hid + j]);
                c[j] = fg * c[j] + ig * gg;
                h[j] = og * c[j].tanh();
            }
            x = h.clone();
            dim = hid;
        }
        if let Some(pr) = self.config.projection {
            x = math::affine(&x, p.get("nnlm.proj.w").data(), Some(p.get("nnlm.proj.b").data()), dim, pr);
            dim = pr;
        }
        let logits = math::affine(
            &x,
            p.get("nnlm.out.w").data(),
            Some(p.get("nnlm.out.b").data()),
            dim,
            self.config.vocab_size + 1,
        );
        state.log_probs = math::log_softmax_vec(&logits[..self.config.vocab_size]);
    }

    /// Log-distribution after consuming an explicit history, which must start
    /// with SOS and contain only non-blank symbols after it.
    pub fn score_history(&self, history: &[usize]) -> Result<Vec<f32>> {
        if history.first() != Some(&SOS) {
            return Err(Error::Contract("language model history must begin with SOS".into()));
        }
        let mut state = self.start();
        for &s in &history[1..] {
            state = self.step(&state, s)?;
        }
        Ok(state.log_probs)
    }
}

/// Incremental LM state: per-layer hidden and cell vectors plus the current
/// log-distribution over the V real symbols (index `id - 1` for symbol `id`).
#[derive(Debug, Clone)]
pub struct NnlmState {
    h: Vec<Vec<f32>>,
    c: Vec<Vec<f32>>,
    pub log_probs: Vec<f32>,
}

impl NnlmState {
    pub fn log_prob(&self, symbol: usize) -> f32 {
        self.log_probs[symbol - 1]
    }
}
