//! The convolution+transformer RNN-T: encoder, prediction network, gated
//! joint and output head.
//!
//! Two forward paths exist. The taped path (generic over the scalar type)
//! is used for training and as the recompute-from-scratch reference; the
//! untaped incremental path drives beam search, carrying per-layer caches so
//! extending the label history costs one step.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::math;
use crate::model::config::{DecoderLayerConfig, EncoderLayerConfig, RnntConfig};
use crate::model::params::{Bound, ModelParams};
use crate::tape::{multi_head_attention, AttentionVars, Tape, VarId};
use crate::tensor::{Real, Tensor};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy)]
pub(crate) enum InitKind {
    FanIn(usize),
    Zero,
    One,
    Embedding,
}

pub(crate) fn init_params(
    shapes: &[(String, Vec<usize>, InitKind)],
    seed: u64,
) -> ModelParams {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ModelParams::new();
    for (name, shape, kind) in shapes {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = match kind {
            InitKind::FanIn(fan_in) => {
                let bound = 1.0 / (*fan_in as f32).sqrt();
                (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
            }
            InitKind::Zero => vec![0.0; n],
            InitKind::One => vec![1.0; n],
            InitKind::Embedding => (0..n).map(|_| rng.gen_range(-0.1..0.1)).collect(),
        };
        params.insert(name.clone(), Tensor::new(shape.clone(), data).expect("init shape"));
    }
    params
}

fn transformer_shapes(
    out: &mut Vec<(String, Vec<usize>, InitKind)>,
    prefix: &str,
    d_model: usize,
    d_ff: usize,
) {
    let p = |s: &str| format!("{}.{}", prefix, s);
    out.push((p("ln1.g"), vec![d_model], InitKind::One));
    out.push((p("ln1.b"), vec![d_model], InitKind::Zero));
    for w in ["wq", "wk", "wv", "wo"] {
        out.push((p(&format!("attn.{}", w)), vec![d_model, d_model], InitKind::FanIn(d_model)));
        out.push((p(&format!("attn.b{}", &w[1..])), vec![d_model], InitKind::Zero));
    }
    out.push((p("ln2.g"), vec![d_model], InitKind::One));
    out.push((p("ln2.b"), vec![d_model], InitKind::Zero));
    out.push((p("ff1.w"), vec![d_model, d_ff], InitKind::FanIn(d_model)));
    out.push((p("ff1.b"), vec![d_ff], InitKind::Zero));
    out.push((p("ff2.w"), vec![d_ff, d_model], InitKind::FanIn(d_ff)));
    out.push((p("ff2.b"), vec![d_model], InitKind::Zero));
}

pub(crate) fn rnnt_param_shapes(config: &RnntConfig) -> Vec<(String, Vec<usize>, InitKind)> {
    let mut out = Vec::new();
    // encoder
    let mut dim = config.encoder.feature_dim;
    for (i, l) in config.encoder.layers.iter().enumerate() {
        match l {
            EncoderLayerConfig::Tdnn { offsets, out_dim, .. } => {
                let fan_in = offsets.len() * dim;
                out.push((format!("enc.{}.w", i), vec![fan_in, *out_dim], InitKind::FanIn(fan_in)));
                out.push((format!("enc.{}.b", i), vec![*out_dim], InitKind::Zero));
                dim = *out_dim;
            }
            EncoderLayerConfig::Transformer { d_model, d_ff, .. } => {
                transformer_shapes(&mut out, &format!("enc.{}", i), *d_model, *d_ff);
                dim = *d_model;
            }
        }
    }
    out.push(("enc.out_ln.g".into(), vec![dim], InitKind::One));
    out.push(("enc.out_ln.b".into(), vec![dim], InitKind::Zero));

    // decoder: embedding row 0 is the learned start state
    out.push((
        "dec.embed".into(),
        vec![config.vocab_size + 1, config.decoder.embed_dim],
        InitKind::Embedding,
    ));
    let mut dim = config.decoder.embed_dim;
    for (i, l) in config.decoder.layers.iter().enumerate() {
        match l {
            DecoderLayerConfig::CausalConv { out_dim, kernel } => {
                let fan_in = kernel * dim;
                out.push((format!("dec.{}.w", i), vec![fan_in, *out_dim], InitKind::FanIn(fan_in)));
                out.push((format!("dec.{}.b", i), vec![*out_dim], InitKind::Zero));
                dim = *out_dim;
            }
            DecoderLayerConfig::Transformer { d_model, d_ff, .. } => {
                transformer_shapes(&mut out, &format!("dec.{}", i), *d_model, *d_ff);
                dim = *d_model;
            }
        }
    }
    out.push(("dec.out_ln.g".into(), vec![dim], InitKind::One));
    out.push(("dec.out_ln.b".into(), vec![dim], InitKind::Zero));

    // joint
    let cat = config.encoder.output_dim() + config.decoder.output_dim();
    let j = config.joint_dim;
    let v1 = config.vocab_size + 1;
    out.push(("joint.wf".into(), vec![cat, j], InitKind::FanIn(cat)));
    out.push(("joint.bf".into(), vec![j], InitKind::Zero));
    out.push(("joint.wg".into(), vec![cat, j], InitKind::FanIn(cat)));
    out.push(("joint.bg".into(), vec![j], InitKind::Zero));
    out.push(("joint.wo".into(), vec![j, v1], InitKind::FanIn(j)));
    out.push(("joint.bo".into(), vec![v1], InitKind::Zero));
    out
}

#[derive(Debug, Clone)]
pub struct RnntModel {
    pub config: RnntConfig,
    pub params: ModelParams,
}

impl RnntModel {
    pub fn init(config: RnntConfig) -> Result<Self> {
        config.validate()?;
        let shapes = rnnt_param_shapes(&config);
        let params = init_params(&shapes, config.init_seed);
        Ok(RnntModel { config, params })
    }

    pub fn from_parts(config: RnntConfig, params: ModelParams) -> Result<Self> {
        config.validate()?;
        let expected = rnnt_param_shapes(&config);
        if expected.len() != params.len()
            || !expected.iter().zip(params.names()).all(|((n, ..), m)| n == m)
        {
            return Err(Error::Format("checkpoint parameters do not match config".into()));
        }
        Ok(RnntModel { config, params })
    }

    /// Scalar parameter count implied by the config, without allocating.
    pub fn param_count(config: &RnntConfig) -> usize {
        rnnt_param_shapes(config)
            .iter()
            .map(|(_, s, _)| s.iter().product::<usize>())
            .sum()
    }

    pub fn bind<T: Real>(&self, tape: &mut Tape<T>) -> Bound {
        Bound::bind(&self.params, tape)
    }

    fn attention_vars(bound: &Bound, prefix: &str) -> AttentionVars {
        AttentionVars {
            wq: bound.var(&format!("{}.attn.wq", prefix)),
            bq: bound.var(&format!("{}.attn.bq", prefix)),
            wk: bound.var(&format!("{}.attn.wk", prefix)),
            bk: bound.var(&format!("{}.attn.bk", prefix)),
            wv: bound.var(&format!("{}.attn.wv", prefix)),
            bv: bound.var(&format!("{}.attn.bv", prefix)),
            wo: bound.var(&format!("{}.attn.wo", prefix)),
            bo: bound.var(&format!("{}.attn.bo", prefix)),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn transformer_block<T: Real>(
        tape: &mut Tape<T>,
        bound: &Bound,
        prefix: &str,
        x: VarId,
        heads: usize,
        causal: bool,
        dropout: f64,
        rng: &mut Option<&mut ChaCha8Rng>,
    ) -> Result<VarId> {
        let g1 = bound.var(&format!("{}.ln1.g", prefix));
        let b1 = bound.var(&format!("{}.ln1.b", prefix));
        let ln1 = tape.layer_norm(x, g1, b1)?;
        let vars = Self::attention_vars(bound, prefix);
        let p = if rng.is_some() { dropout } else { 0.0 };
        let attn = multi_head_attention(tape, ln1, &vars, heads, causal, p, rng.as_deref_mut())?;
        let a = tape.add(x, attn)?;
        let g2 = bound.var(&format!("{}.ln2.g", prefix));
        let b2 = bound.var(&format!("{}.ln2.b", prefix));
        let ln2 = tape.layer_norm(a, g2, b2)?;
        let w1 = bound.var(&format!("{}.ff1.w", prefix));
        let bb1 = bound.var(&format!("{}.ff1.b", prefix));
        let mut ff = tape.matmul(ln2, w1)?;
        ff = tape.add(ff, bb1)?;
        ff = tape.relu(ff)?;
        if p > 0.0 {
            if let Some(r) = rng.as_deref_mut() {
                ff = tape.dropout(ff, p, r)?;
            }
        }
        let w2 = bound.var(&format!("{}.ff2.w", prefix));
        let bb2 = bound.var(&format!("{}.ff2.b", prefix));
        ff = tape.matmul(ff, w2)?;
        ff = tape.add(ff, bb2)?;
        tape.add(a, ff)
    }

    /// Taped encoder forward: `T x F` features to `T' x D_enc` hidden states.
    /// Pass `Some(rng)` for training mode (enables dropout).
    pub fn encode<T: Real>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        features: &Tensor<T>,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<VarId> {
        if features.rank() != 2 || features.cols() != self.config.encoder.feature_dim {
            return Err(Error::ShapeMismatch {
                op: "encode",
                details: format!(
                    "features {:?}, expected [T, {}]",
                    features.shape(),
                    self.config.encoder.feature_dim
                ),
            });
        }
        let min = self.config.encoder.min_frames();
        if features.rows() < min {
            return Err(Error::Contract(format!(
                "utterance has {} frames, encoder needs at least {}",
                features.rows(),
                min
            )));
        }
        let mut x = tape.leaf(features.clone(), false);
        for (i, l) in self.config.encoder.layers.iter().enumerate() {
            match l {
                EncoderLayerConfig::Tdnn { offsets, stride, .. } => {
                    let w = bound.var(&format!("enc.{}.w", i));
                    let b = bound.var(&format!("enc.{}.b", i));
                    x = tape.conv1d_context(x, w, offsets, *stride)?;
                    x = tape.add(x, b)?;
                    x = tape.relu(x)?;
                }
                EncoderLayerConfig::Transformer { heads, dropout, .. } => {
                    x = Self::transformer_block(
                        tape,
                        bound,
                        &format!("enc.{}", i),
                        x,
                        *heads,
                        false,
                        *dropout,
                        &mut rng,
                    )?;
                }
            }
        }
        let g = bound.var("enc.out_ln.g");
        let b = bound.var("enc.out_ln.b");
        tape.layer_norm(x, g, b)
    }

    /// Taped prediction-network forward over a non-blank label prefix.
    /// Returns `(|labels|+1) x D_dec`; row `u` is the prediction vector after
    /// consuming `u` labels (row 0 is the learned start state).
    pub fn decode_prefix<T: Real>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        labels: &[usize],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<VarId> {
        let mut ids = Vec::with_capacity(labels.len() + 1);
        ids.push(0usize); // start state row
        for &l in labels {
            if l == 0 || l > self.config.vocab_size {
                return Err(Error::Contract(format!(
                    "prediction network history must be non-blank symbols, got {}",
                    l
                )));
            }
            ids.push(l);
        }
        let embed = bound.var("dec.embed");
        let mut x = tape.embedding_lookup(embed, &ids)?;
        for (i, l) in self.config.decoder.layers.iter().enumerate() {
            match l {
                DecoderLayerConfig::CausalConv { kernel, .. } => {
                    let w = bound.var(&format!("dec.{}.w", i));
                    let b = bound.var(&format!("dec.{}.b", i));
                    x = tape.conv1d_causal(x, w, *kernel)?;
                    x = tape.add(x, b)?;
                    x = tape.relu(x)?;
                }
                DecoderLayerConfig::Transformer { heads, dropout, .. } => {
                    x = Self::transformer_block(
                        tape,
                        bound,
                        &format!("dec.{}", i),
                        x,
                        *heads,
                        true,
                        *dropout,
                        &mut rng,
                    )?;
                }
            }
        }
        let g = bound.var("dec.out_ln.g");
        let b = bound.var("dec.out_ln.b");
        tape.layer_norm(x, g, b)
    }

    fn joint_from_cat<T: Real>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        cat: VarId,
    ) -> Result<VarId> {
        let f = tape.matmul(cat, bound.var("joint.wf"))?;
        let f = tape.add(f, bound.var("joint.bf"))?;
        let f = tape.tanh(f)?;
        let g = tape.matmul(cat, bound.var("joint.wg"))?;
        let g = tape.add(g, bound.var("joint.bg"))?;
        let g = tape.sigmoid(g)?;
        let h = tape.element_mul(f, g)?;
        let o = tape.matmul(h, bound.var("joint.wo"))?;
        tape.add(o, bound.var("joint.bo"))
    }

    /// Joint logits for the full `(t, u)` grid: row `t*(U+1)+u` of the result
    /// pairs encoder frame `t` with prediction vector `u`.
    pub fn joint_grid<T: Real>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        h_enc: VarId,
        h_dec: VarId,
    ) -> Result<VarId> {
        let u1 = tape.value(h_dec).rows();
        let tf = tape.value(h_enc).rows();
        let enc_rep = tape.repeat_rows(h_enc, u1)?;
        let dec_rep = tape.tile_rows(h_dec, tf)?;
        let cat = tape.concat_cols(&[enc_rep, dec_rep])?;
        self.joint_from_cat(tape, bound, cat)
    }

    /// Joint logits for an explicit list of `(t, u)` pairs (one row each).
    pub fn joint_pairs<T: Real>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        h_enc: VarId,
        h_dec: VarId,
        pairs: &[(usize, usize)],
    ) -> Result<VarId> {
        let t_ids: Vec<usize> = pairs.iter().map(|&(t, _)| t).collect();
        let u_ids: Vec<usize> = pairs.iter().map(|&(_, u)| u).collect();
        let enc_sel = tape.gather_rows(h_enc, &t_ids)?;
        let dec_sel = tape.gather_rows(h_dec, &u_ids)?;
        let cat = tape.concat_cols(&[enc_sel, dec_sel])?;
        self.joint_from_cat(tape, bound, cat)
    }

    // ── untaped incremental path ─────────────────────────────────────

    /// Encoder forward in eval mode, returning the hidden-state matrix.
    pub fn encode_eval(&self, features: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut tape = Tape::<f32>::new();
        let bound = self.bind(&mut tape);
        let h = self.encode(&mut tape, &bound, features, None)?;
        Ok(tape.value(h).clone())
    }

    pub fn decoder_start(&self) -> Result<DecoderState> {
        let mut state = DecoderState::empty(&self.config);
        self.decoder_step_row(&mut state, 0)?;
        Ok(state)
    }

    /// Extend the cached history by one non-blank symbol.
    pub fn decoder_step(&self, state: &DecoderState, symbol: usize) -> Result<DecoderState> {
        if symbol == 0 || symbol > self.config.vocab_size {
            return Err(Error::Contract(format!(
                "prediction network history must be non-blank symbols, got {}",
                symbol
            )));
        }
        let mut next = state.clone();
        self.decoder_step_row(&mut next, symbol)?;
        Ok(next)
    }

    fn decoder_step_row(&self, state: &mut DecoderState, row: usize) -> Result<()> {
        let p = &self.params;
        let embed = p.get("dec.embed");
        let mut x: Vec<f32> = embed.row(row).to_vec();
        let mut dim = self.config.decoder.embed_dim;
        for (i, (l, cache)) in self
            .config
            .decoder
            .layers
            .iter()
            .zip(state.layers.iter_mut())
            .enumerate()
        {
            match (l, cache) {
                (DecoderLayerConfig::CausalConv { out_dim, kernel }, LayerCache::Conv { inputs }) => {
                    inputs.push(x.clone());
                    let w = p.get(&format!("dec.{}.w", i));
                    let b = p.get(&format!("dec.{}.b", i));
                    let pos = inputs.len() - 1;
                    let mut y = b.data().to_vec();
                    for ki in 0..*kernel {
                        let src = pos as i64 + ki as i64 - (*kernel as i64 - 1);
                        if src < 0 {
                            continue;
                        }
                        let block = &w.data()[ki * dim * out_dim..(ki + 1) * dim * out_dim];
                        let contrib = math::affine(&inputs[src as usize], block, None, dim, *out_dim);
                        math::add_in_place(&mut y, &contrib);
                    }
                    math::relu_in_place(&mut y);
                    x = y;
                    dim = *out_dim;
                }
                (
                    DecoderLayerConfig::Transformer { d_model, d_ff, heads, .. },
                    LayerCache::Attn { keys, vals },
                ) => {
                    let pr = format!("dec.{}", i);
                    let get = |s: &str| p.get(&format!("{}.{}", pr, s));
                    let ln1 = math::layer_norm_vec(
                        &x,
                        get("ln1.g").data(),
                        get("ln1.b").data(),
                        LN_EPS,
                    );
                    let q = math::affine(&ln1, get("attn.wq").data(), Some(get("attn.bq").data()), *d_model, *d_model);
                    let k = math::affine(&ln1, get("attn.wk").data(), Some(get("attn.bk").data()), *d_model, *d_model);
                    let v = math::affine(&ln1, get("attn.wv").data(), Some(get("attn.bv").data()), *d_model, *d_model);
                    keys.push(k);
                    vals.push(v);
                    let dk = d_model / heads;
                    let mut ctx = vec![0.0f32; *d_model];
                    for h in 0..*heads {
                        let qh = &q[h * dk..(h + 1) * dk];
                        let scores: Vec<f32> = keys
                            .iter()
                            .map(|krow| {
                                let mut acc = 0.0f64;
                                for d in 0..dk {
                                    acc += qh[d] as f64 * krow[h * dk + d] as f64;
                                }
                                (acc / (dk as f64).sqrt()) as f32
                            })
                            .collect();
                        let weights = math::softmax_vec(&scores);
                        for (j, w) in weights.iter().enumerate() {
                            for d in 0..dk {
                                ctx[h * dk + d] += w * vals[j][h * dk + d];
                            }
                        }
                    }
                    let mut attn = math::affine(&ctx, get("attn.wo").data(), Some(get("attn.bo").data()), *d_model, *d_model);
                    math::add_in_place(&mut attn, &x);
                    let a = attn;
                    let ln2 = math::layer_norm_vec(&a, get("ln2.g").data(), get("ln2.b").data(), LN_EPS);
                    let mut hidden = math::affine(&ln2, get("ff1.w").data(), Some(get("ff1.b").data()), *d_model, *d_ff);
                    math::relu_in_place(&mut hidden);
                    let mut ff = math::affine(&hidden, get("ff2.w").data(), Some(get("ff2.b").data()), *d_ff, *d_model);
                    math::add_in_place(&mut ff, &a);
                    x = ff;
                    dim = *d_model;
                }
                _ => unreachable!("layer cache out of sync with config"),
            }
        }
        let out = math::layer_norm_vec(
            &x,
            p.get("dec.out_ln.g").data(),
            p.get("dec.out_ln.b").data(),
            LN_EPS,
        );
        state.out = out;
        state.len += 1;
        Ok(())
    }

    /// Raw joint logits for one `(h_enc, h_dec)` pair.
    pub fn joint_eval(&self, h_enc: &[f32], h_dec: &[f32]) -> Vec<f32> {
        let p = &self.params;
        let mut cat = Vec::with_capacity(h_enc.len() + h_dec.len());
        cat.extend_from_slice(h_enc);
        cat.extend_from_slice(h_dec);
        let j = self.config.joint_dim;
        let f = math::affine(&cat, p.get("joint.wf").data(), Some(p.get("joint.bf").data()), cat.len(), j);
        let g = math::affine(&cat, p.get("joint.wg").data(), Some(p.get("joint.bg").data()), cat.len(), j);
        let h: Vec<f32> = f
            .iter()
            .zip(&g)
            .map(|(&fv, &gv)| fv.tanh() * math::sigmoid(gv))
            .collect();
        math::affine(
            &h,
            p.get("joint.wo").data(),
            Some(p.get("joint.bo").data()),
            j,
            self.config.vocab_size + 1,
        )
    }
}

/// Incremental prediction-network state: per-layer activation caches plus the
/// current prediction vector.
#[derive(Debug, Clone)]
pub struct DecoderState {
    layers: Vec<LayerCache>,
    pub out: Vec<f32>,
    len: usize,
}

#[derive(Debug, Clone)]
enum LayerCache {
    Conv { inputs: Vec<Vec<f32>> },
    Attn { keys: Vec<Vec<f32>>, vals: Vec<Vec<f32>> },
}

impl DecoderState {
    fn empty(config: &RnntConfig) -> Self {
        let layers = config
            .decoder
            .layers
            .iter()
            .map(|l| match l {
                DecoderLayerConfig::CausalConv { .. } => LayerCache::Conv { inputs: Vec::new() },
                DecoderLayerConfig::Transformer { .. } => {
                    LayerCache::Attn { keys: Vec::new(), vals: Vec::new() }
                }
            })
            .collect();
        DecoderState { layers, out: Vec::new(), len: 0 }
    }

    /// Number of consumed positions including the start state.
    pub fn positions(&self) -> usize {
        self.len
    }
}

/// Log-distribution over blank + symbols from joint logits, with softmax
/// smoothing: logits are scaled by `beta` before normalization. `beta = 1`
/// recovers the plain output distribution.
pub fn output_distribution<T: Real>(tape: &mut Tape<T>, logits: VarId, beta: f64) -> Result<VarId> {
    if beta <= 0.0 || beta > 1.0 {
        return Err(Error::Contract(format!("smoothing factor must be in (0, 1], got {}", beta)));
    }
    let scaled = if beta == 1.0 { logits } else { tape.scale(logits, beta)? };
    tape.log_softmax(scaled)
}
