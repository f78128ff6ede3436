//! Listen, attend and spell.
//!
//! The listener is a pyramidal BLSTM; the attender scores encoder frames
//! with `vᵀ tanh(W_q·q + W_h·h_u + b)` against the top speller state of the
//! previous step; the speller is an LSTM stack fed with
//! `[embedding(prev label) ; context]`. Outputs are the target labels plus an
//! end-of-sequence class; the start-of-sequence symbol only exists as an
//! embedding row. Both sit at index `num_labels`.

use std::cmp::Ordering;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{
    encoder_backward, encoder_forward, lstm_cell_step, lstm_cell_step_backward, Encoder,
    EncoderCache, EncoderConfig, EncoderError, EncoderKind, LstmCell, StepCache,
};
use crate::hypothesis::Hypothesis;
use crate::numerics::{
    argmax, axpy, dot, log_softmax, softmax, Gradients, Init, Matrix, NumericsError, ParamId,
    ParamStore, TrainMode,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AttentionError {
    #[error("attention over an empty encoder sequence")]
    EmptyEncoderOutput,
    #[error("empty target")]
    EmptyTarget,
    #[error("label {label} out of range for {num_labels} labels")]
    LabelOutOfRange { label: usize, num_labels: usize },
    #[error("invalid LAS config: {0}")]
    Config(String),
    #[error("forward cache was computed for parameter version {cached}, store is at {current}")]
    StaleCache { cached: u64, current: u64 },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LasConfig {
    pub input_dim: usize,
    pub num_labels: usize,
    pub listener_layers: usize,
    pub listener_units: usize,
    pub pyramid_step: usize,
    pub speller_layers: usize,
    pub speller_units: usize,
    pub embed_dim: usize,
    pub attention_dim: usize,
    pub beam_width: usize,
    /// `None` means `2 × encoder length + 10`.
    pub max_decode_len: Option<usize>,
    pub dropout_rate: f64,
}

impl LasConfig {
    /// Listener 3×512 with pyramid step 2, speller 2×512, beam 16,
    /// dropout 0.5.
    pub fn new(input_dim: usize, num_labels: usize) -> Self {
        LasConfig {
            input_dim,
            num_labels,
            listener_layers: 3,
            listener_units: 512,
            pyramid_step: 2,
            speller_layers: 2,
            speller_units: 512,
            embed_dim: 64,
            attention_dim: 128,
            beam_width: 16,
            max_decode_len: None,
            dropout_rate: 0.5,
        }
    }

    pub fn validate(&self) -> Result<(), AttentionError> {
        let bad = |m: &str| Err(AttentionError::Config(m.to_string()));
        if self.beam_width == 0 {
            return bad("beam_width must be >= 1");
        }
        if self.max_decode_len == Some(0) {
            return bad("max_decode_len must be >= 1");
        }
        if self.speller_layers == 0 || self.speller_units == 0 {
            return bad("speller needs at least one layer and unit");
        }
        if self.embed_dim == 0 || self.attention_dim == 0 || self.num_labels == 0 {
            return bad("embed_dim, attention_dim and num_labels must be >= 1");
        }
        self.listener_config().validate()?;
        Ok(())
    }

    pub fn listener_config(&self) -> EncoderConfig {
        EncoderConfig {
            kind: EncoderKind::Pyramidal,
            input_dim: self.input_dim,
            layers: self.listener_layers,
            units_per_direction: self.listener_units,
            pyramid_step: self.pyramid_step,
            dropout_rate: self.dropout_rate,
        }
    }

    pub fn decode_limit(&self, encoder_len: usize) -> usize {
        self.max_decode_len.unwrap_or(2 * encoder_len + 10)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Attender {
    pub w_q: ParamId,
    pub w_h: ParamId,
    pub b: ParamId,
    pub v: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LasModel {
    pub cfg: LasConfig,
    pub listener: Encoder,
    pub attender: Attender,
    pub embedding: ParamId,
    pub speller: Vec<LstmCell>,
    pub w_out: ParamId,
    pub b_out: ParamId,
}

fn param(store: &mut ParamStore, name: &str, rows: usize, cols: usize, init: Init) -> Result<ParamId, AttentionError> {
    if let Some(id) = store.id(name) {
        if store.tensor(id).shape() != (rows, cols) {
            return Err(AttentionError::Config(format!(
                "parameter `{name}` has shape {:?}, expected {:?}",
                store.tensor(id).shape(),
                (rows, cols)
            )));
        }
        return Ok(id);
    }
    Ok(store.add(name, rows, cols, init)?)
}

impl LasModel {
    pub fn register(store: &mut ParamStore, cfg: &LasConfig) -> Result<Self, AttentionError> {
        cfg.validate()?;
        let listener = Encoder::register(store, "las.listen", &cfg.listener_config())?;
        let enc_dim = 2 * cfg.listener_units;
        let a = cfg.attention_dim;
        let s = cfg.speller_units;
        let attender = Attender {
            w_q: param(store, "las.attend.w_q", a, s, Init::ScaledUniform { fan_in: s })?,
            w_h: param(store, "las.attend.w_h", a, enc_dim, Init::ScaledUniform { fan_in: enc_dim })?,
            b: param(store, "las.attend.b", a, 1, Init::Zeros)?,
            v: param(store, "las.attend.v", a, 1, Init::ScaledUniform { fan_in: a })?,
        };
        let embedding = param(
            store,
            "las.embed",
            cfg.num_labels + 1,
            cfg.embed_dim,
            Init::ScaledUniform { fan_in: cfg.embed_dim },
        )?;
        let mut speller = Vec::with_capacity(cfg.speller_layers);
        for l in 0..cfg.speller_layers {
            let input = if l == 0 { cfg.embed_dim + enc_dim } else { s };
            speller.push(LstmCell::register(store, &format!("las.spell.l{l}"), input, s)?);
        }
        let w_out = param(
            store,
            "las.out.w",
            cfg.num_labels + 1,
            s + enc_dim,
            Init::ScaledUniform { fan_in: s + enc_dim },
        )?;
        let b_out = param(store, "las.out.b", cfg.num_labels + 1, 1, Init::Zeros)?;
        Ok(LasModel {
            cfg: cfg.clone(),
            listener,
            attender,
            embedding,
            speller,
            w_out,
            b_out,
        })
    }

    /// Start-of-sequence embedding row and end-of-sequence output class.
    pub fn sos(&self) -> usize {
        self.cfg.num_labels
    }

    pub fn eos(&self) -> usize {
        self.cfg.num_labels
    }

    pub fn num_outputs(&self) -> usize {
        self.cfg.num_labels + 1
    }

    fn enc_dim(&self) -> usize {
        2 * self.cfg.listener_units
    }
}

/// Speller recurrent state between output steps.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderState {
    pub h: Vec<Vec<f64>>,
    pub c: Vec<Vec<f64>>,
    pub prev_label: usize,
    pub log_score: f64,
}

impl DecoderState {
    pub fn initial(model: &LasModel) -> Self {
        let n = model.cfg.speller_units;
        DecoderState {
            h: vec![vec![0.0; n]; model.cfg.speller_layers],
            c: vec![vec![0.0; n]; model.cfg.speller_layers],
            prev_label: model.sos(),
            log_score: 0.0,
        }
    }

    /// Attention query: the top speller layer's hidden state.
    pub fn query(&self) -> &[f64] {
        self.h.last().expect("speller has layers")
    }
}

/// Encodes features with the pyramidal listener. Training mode adds noise
/// and dropout.
pub fn listen(
    model: &LasModel,
    store: &ParamStore,
    features: &Matrix,
    train: Option<&mut TrainMode<'_>>,
) -> Result<(Matrix, EncoderCache), AttentionError> {
    Ok(match train {
        Some(mode) => {
            let noisy = mode.perturb(features)?;
            encoder_forward(&model.listener, store, &noisy, Some(&mut *mode.rng))?
        }
        None => encoder_forward(&model.listener, store, features, None)?,
    })
}

/// `W_h·h_u + b` for every encoder frame.
fn attention_keys(model: &LasModel, store: &ParamStore, h_enc: &Matrix) -> Matrix {
    let a = model.cfg.attention_dim;
    let mut keys = Matrix::zeros(h_enc.rows(), a);
    let bias = store.tensor(model.attender.b).data();
    for u in 0..h_enc.rows() {
        let row = keys.row_mut(u);
        row.copy_from_slice(bias);
        store.tensor(model.attender.w_h).matvec_acc(h_enc.row(u), row);
    }
    keys
}

#[derive(Clone, Debug)]
struct AttendCache {
    query: Vec<f64>,
    weights: Vec<f64>,
    /// `tanh(W_q·q + key_u)` per frame.
    activations: Matrix,
}

fn attend_with_keys(
    model: &LasModel,
    store: &ParamStore,
    query: &[f64],
    keys: &Matrix,
    h_enc: &Matrix,
) -> (Vec<f64>, AttendCache) {
    let a = model.cfg.attention_dim;
    let mut qp = vec![0.0; a];
    store.tensor(model.attender.w_q).matvec_acc(query, &mut qp);
    let v = store.tensor(model.attender.v).data();
    let mut activations = Matrix::zeros(h_enc.rows(), a);
    let mut scores = vec![0.0; h_enc.rows()];
    for u in 0..h_enc.rows() {
        let row = activations.row_mut(u);
        for k in 0..a {
            row[k] = (qp[k] + keys.get(u, k)).tanh();
        }
        scores[u] = dot(row, v);
    }
    let weights = softmax(&scores);
    let mut context = vec![0.0; h_enc.cols()];
    for (u, &w) in weights.iter().enumerate() {
        axpy(w, h_enc.row(u), &mut context);
    }
    (
        context,
        AttendCache {
            query: query.to_vec(),
            weights,
            activations,
        },
    )
}

/// Attention weights over `h_enc` and the weighted context vector.
pub fn attend(
    model: &LasModel,
    store: &ParamStore,
    query: &[f64],
    h_enc: &Matrix,
) -> Result<(Vec<f64>, Vec<f64>), AttentionError> {
    if h_enc.rows() == 0 {
        return Err(AttentionError::EmptyEncoderOutput);
    }
    let keys = attention_keys(model, store, h_enc);
    let (context, cache) = attend_with_keys(model, store, query, &keys, h_enc);
    Ok((cache.weights, context))
}

/// Backward through one attention step. Gradients wrt the keys and encoder
/// frames are accumulated; the return value is the gradient wrt the query.
fn attend_backward(
    model: &LasModel,
    store: &ParamStore,
    cache: &AttendCache,
    h_enc: &Matrix,
    d_context: &[f64],
    d_keys: &mut Matrix,
    d_h_enc: &mut Matrix,
    grads: &mut Gradients,
) -> Vec<f64> {
    let a = model.cfg.attention_dim;
    let w = &cache.weights;
    let dw: Vec<f64> = (0..h_enc.rows()).map(|u| dot(d_context, h_enc.row(u))).collect();
    for (u, &wu) in w.iter().enumerate() {
        axpy(wu, d_context, d_h_enc.row_mut(u));
    }
    let mean: f64 = w.iter().zip(&dw).map(|(a, b)| a * b).sum();
    let v = store.tensor(model.attender.v).data().to_vec();
    let mut d_qp = vec![0.0; a];
    for u in 0..h_enc.rows() {
        let d_score = w[u] * (dw[u] - mean);
        if d_score == 0.0 {
            continue;
        }
        let act = cache.activations.row(u);
        axpy(d_score, act, grads.get_mut(model.attender.v).data_mut());
        let dk = d_keys.row_mut(u);
        for k in 0..a {
            let da = d_score * v[k] * (1.0 - act[k] * act[k]);
            dk[k] += da;
            d_qp[k] += da;
        }
    }
    grads.get_mut(model.attender.w_q).add_outer(&d_qp, &cache.query);
    let mut d_query = vec![0.0; cache.query.len()];
    store.tensor(model.attender.w_q).matvec_t_acc(&d_qp, &mut d_query);
    d_query
}

#[derive(Clone, Debug)]
struct SpellCache {
    prev_label: usize,
    context: Vec<f64>,
    cells: Vec<StepCache>,
    masks: Vec<Option<Vec<f64>>>,
    out_input: Vec<f64>,
}

/// Runs the speller stack for one output step. Returns output logits, the
/// next state (with `prev_label` unchanged) and the step cache.
fn speller_forward(
    model: &LasModel,
    store: &ParamStore,
    state: &DecoderState,
    context: &[f64],
    mut dropout: Option<&mut ChaCha8Rng>,
) -> Result<(Vec<f64>, DecoderState, SpellCache), AttentionError> {
    let mut input = store.tensor(model.embedding).row(state.prev_label).to_vec();
    input.extend_from_slice(context);
    let mut next = state.clone();
    let mut cells = Vec::with_capacity(model.speller.len());
    let mut masks = Vec::with_capacity(model.speller.len());
    for (l, cell) in model.speller.iter().enumerate() {
        let (h, c, cache) = lstm_cell_step(cell, store, &input, &state.h[l], &state.c[l])?;
        let mut out = h.clone();
        let mask = match dropout.as_deref_mut() {
            Some(rng) if model.cfg.dropout_rate > 0.0 => {
                let keep = 1.0 / (1.0 - model.cfg.dropout_rate);
                let m: Vec<f64> = (0..out.len())
                    .map(|_| if rng.random::<f64>() < model.cfg.dropout_rate { 0.0 } else { keep })
                    .collect();
                out.iter_mut().zip(&m).for_each(|(v, k)| *v *= k);
                Some(m)
            }
            _ => None,
        };
        next.h[l] = h;
        next.c[l] = c;
        cells.push(cache);
        masks.push(mask);
        input = out;
    }
    input.extend_from_slice(context);
    let mut logits = store.tensor(model.b_out).data().to_vec();
    store.tensor(model.w_out).matvec_acc(&input, &mut logits);
    let cache = SpellCache {
        prev_label: state.prev_label,
        context: context.to_vec(),
        cells,
        masks,
        out_input: input,
    };
    Ok((logits, next, cache))
}

/// One speller step: distribution over labels plus end-of-sequence, and
/// the next decoder state.
pub fn spell_step(
    model: &LasModel,
    store: &ParamStore,
    state: &DecoderState,
    context: &[f64],
) -> Result<(Vec<f64>, DecoderState), AttentionError> {
    let (logits, next, _) = speller_forward(model, store, state, context, None)?;
    Ok((softmax(&logits), next))
}

/// Saved forward pass of [`las_forward`].
#[derive(Debug)]
pub struct LasCache {
    version: u64,
    encoder: EncoderCache,
    h_enc: Matrix,
    outputs: Vec<usize>,
    steps: Vec<(AttendCache, SpellCache, Vec<f64>)>,
}

fn check_target(model: &LasModel, target: &[usize]) -> Result<(), AttentionError> {
    if target.is_empty() {
        return Err(AttentionError::EmptyTarget);
    }
    if let Some(&label) = target.iter().find(|&&l| l >= model.cfg.num_labels) {
        return Err(AttentionError::LabelOutOfRange {
            label,
            num_labels: model.cfg.num_labels,
        });
    }
    Ok(())
}

/// Teacher-forced loss: mean cross-entropy over the target labels and the
/// final end-of-sequence step.
pub fn las_forward(
    model: &LasModel,
    store: &ParamStore,
    features: &Matrix,
    target: &[usize],
    mut train: Option<&mut TrainMode<'_>>,
) -> Result<(f64, LasCache), AttentionError> {
    check_target(model, target)?;
    let (h_enc, enc_cache) = listen(model, store, features, train.as_deref_mut())?;
    let keys = attention_keys(model, store, &h_enc);
    let mut outputs = target.to_vec();
    outputs.push(model.eos());
    let mut state = DecoderState::initial(model);
    let mut steps = Vec::with_capacity(outputs.len());
    let mut total = 0.0;
    for &y in &outputs {
        let (context, attn) = attend_with_keys(model, store, state.query(), &keys, &h_enc);
        let dropout = train.as_deref_mut().map(|m| &mut *m.rng);
        let (logits, mut next, spell) = speller_forward(model, store, &state, &context, dropout)?;
        let log_p = log_softmax(&logits);
        total -= log_p[y];
        next.prev_label = y;
        state = next;
        steps.push((attn, spell, log_p));
    }
    let loss = total / outputs.len() as f64;
    Ok((
        loss,
        LasCache {
            version: store.version(),
            encoder: enc_cache,
            h_enc,
            outputs,
            steps,
        },
    ))
}

pub fn las_loss(
    model: &LasModel,
    store: &ParamStore,
    features: &Matrix,
    target: &[usize],
    train: Option<&mut TrainMode<'_>>,
) -> Result<f64, AttentionError> {
    Ok(las_forward(model, store, features, target, train)?.0)
}

/// Backpropagates a [`las_forward`] pass into `grads`.
pub fn las_backward(
    model: &LasModel,
    store: &ParamStore,
    cache: LasCache,
    grads: &mut Gradients,
) -> Result<(), AttentionError> {
    if cache.version != store.version() {
        return Err(AttentionError::StaleCache {
            cached: cache.version,
            current: store.version(),
        });
    }
    let layers = model.speller.len();
    let n = model.cfg.speller_units;
    let e = model.cfg.embed_dim;
    let enc_dim = model.enc_dim();
    let scale = 1.0 / cache.outputs.len() as f64;
    let h_enc = &cache.h_enc;
    let mut d_keys = Matrix::zeros(h_enc.rows(), model.cfg.attention_dim);
    let mut d_h_enc = Matrix::zeros(h_enc.rows(), enc_dim);
    let mut dh_next = vec![vec![0.0; n]; layers];
    let mut dc_next = vec![vec![0.0; n]; layers];

    for (i, (attn, spell, log_p)) in cache.steps.iter().enumerate().rev() {
        let y = cache.outputs[i];
        let mut d_logits: Vec<f64> = log_p.iter().map(|lp| lp.exp() * scale).collect();
        d_logits[y] -= scale;
        grads.get_mut(model.w_out).add_outer(&d_logits, &spell.out_input);
        axpy(1.0, &d_logits, grads.get_mut(model.b_out).data_mut());
        let mut d_out_in = vec![0.0; n + enc_dim];
        store.tensor(model.w_out).matvec_t_acc(&d_logits, &mut d_out_in);
        let mut d_context = d_out_in[n..].to_vec();

        // gradient arriving at the (dropped-out) output of the top layer
        let mut d_above = d_out_in[..n].to_vec();
        for l in (0..layers).rev() {
            let mut dh = d_above;
            if let Some(mask) = &spell.masks[l] {
                dh.iter_mut().zip(mask).for_each(|(v, m)| *v *= m);
            }
            axpy(1.0, &dh_next[l], &mut dh);
            let (dx, dh_prev, dc_prev) =
                lstm_cell_step_backward(&model.speller[l], store, &spell.cells[l], &dh, &dc_next[l], grads);
            dh_next[l] = dh_prev;
            dc_next[l] = dc_prev;
            d_above = dx;
        }
        // d_above is now the gradient wrt [embedding ; context]
        axpy(1.0, &d_above[..e], grads.get_mut(model.embedding).row_mut(spell.prev_label));
        axpy(1.0, &d_above[e..], &mut d_context);
        debug_assert_eq!(spell.context.len(), d_context.len());

        let d_query = attend_backward(model, store, attn, h_enc, &d_context, &mut d_keys, &mut d_h_enc, grads);
        // the query at step i is the top hidden state of step i-1
        if i > 0 {
            axpy(1.0, &d_query, &mut dh_next[layers - 1]);
        }
    }

    for u in 0..h_enc.rows() {
        let dk = d_keys.row(u);
        grads.get_mut(model.attender.w_h).add_outer(dk, h_enc.row(u));
        axpy(1.0, dk, grads.get_mut(model.attender.b).data_mut());
        store.tensor(model.attender.w_h).matvec_t_acc(dk, d_h_enc.row_mut(u));
    }
    encoder_backward(&model.listener, store, cache.encoder, &d_h_enc, grads)?;
    Ok(())
}

/// Loss of one utterance with gradients accumulated into `grads`.
pub fn las_loss_and_grad(
    model: &LasModel,
    store: &ParamStore,
    features: &Matrix,
    target: &[usize],
    train: Option<&mut TrainMode<'_>>,
    grads: &mut Gradients,
) -> Result<f64, AttentionError> {
    let (loss, cache) = las_forward(model, store, features, target, train)?;
    las_backward(model, store, cache, grads)?;
    Ok(loss)
}

/// Stepwise argmax decoding up to `max_len` output steps.
pub fn greedy_decode(
    model: &LasModel,
    store: &ParamStore,
    features: &Matrix,
    max_len: Option<usize>,
) -> Result<Hypothesis, AttentionError> {
    let (h_enc, _) = listen(model, store, features, None)?;
    let limit = max_len.unwrap_or_else(|| model.cfg.decode_limit(h_enc.rows()));
    let keys = attention_keys(model, store, &h_enc);
    let mut state = DecoderState::initial(model);
    let mut ids = Vec::new();
    for _ in 0..limit {
        let (context, _) = attend_with_keys(model, store, state.query(), &keys, &h_enc);
        let (logits, mut next, _) = speller_forward(model, store, &state, &context, None)?;
        let log_p = log_softmax(&logits);
        let k = argmax(&log_p);
        let score = state.log_score + log_p[k];
        if k == model.eos() {
            return Ok(Hypothesis::new(ids, score));
        }
        ids.push(k);
        next.prev_label = k;
        next.log_score = score;
        state = next;
    }
    Ok(Hypothesis {
        ids,
        log_score: state.log_score,
        truncated: true,
    })
}

/// Orders completed hypotheses: higher score, then shorter, then
/// lexicographically smaller ids.
pub fn rank_hypotheses(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.log_score
        .total_cmp(&a.log_score)
        .then(a.ids.len().cmp(&b.ids.len()))
        .then_with(|| a.ids.cmp(&b.ids))
}

struct Beam {
    ids: Vec<usize>,
    state: DecoderState,
}

/// Left-to-right beam search.
///
/// Each step expands every live beam over all outputs and keeps the best
/// `beam_width` candidates; chosen end-of-sequence candidates move to the
/// completed pool and leave the beam. Search ends when the beam is empty or
/// the length limit is reached. If nothing completed, the best running
/// hypothesis is returned with `truncated` set.
pub fn beam_search(
    model: &LasModel,
    store: &ParamStore,
    features: &Matrix,
    beam_width: usize,
    max_len: Option<usize>,
) -> Result<Vec<Hypothesis>, AttentionError> {
    if beam_width == 0 {
        return Err(AttentionError::Config("beam_width must be >= 1".into()));
    }
    let (h_enc, _) = listen(model, store, features, None)?;
    let limit = max_len.unwrap_or_else(|| model.cfg.decode_limit(h_enc.rows()));
    let keys = attention_keys(model, store, &h_enc);
    let eos = model.eos();
    let mut live = vec![Beam {
        ids: Vec::new(),
        state: DecoderState::initial(model),
    }];
    let mut completed = Vec::new();
    for _ in 0..limit {
        if live.is_empty() {
            break;
        }
        let mut expansions = Vec::with_capacity(live.len());
        let mut candidates = Vec::with_capacity(live.len() * model.num_outputs());
        for (b, beam) in live.iter().enumerate() {
            let (context, _) = attend_with_keys(model, store, beam.state.query(), &keys, &h_enc);
            let (logits, next, _) = speller_forward(model, store, &beam.state, &context, None)?;
            let log_p = log_softmax(&logits);
            for (k, lp) in log_p.iter().enumerate() {
                candidates.push((beam.state.log_score + lp, b, k));
            }
            expansions.push(next);
        }
        candidates.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
        let mut next_live = Vec::with_capacity(beam_width);
        for &(score, b, k) in candidates.iter().take(beam_width) {
            if k == eos {
                completed.push(Hypothesis::new(live[b].ids.clone(), score));
            } else {
                let mut ids = live[b].ids.clone();
                ids.push(k);
                let mut state = expansions[b].clone();
                state.prev_label = k;
                state.log_score = score;
                next_live.push(Beam { ids, state });
            }
        }
        live = next_live;
    }
    if completed.is_empty() {
        let best = live
            .into_iter()
            .map(|b| Hypothesis {
                ids: b.ids,
                log_score: b.state.log_score,
                truncated: true,
            })
            .min_by(rank_hypotheses)
            .expect("beam cannot be empty without completions");
        return Ok(vec![best]);
    }
    completed.sort_by(rank_hypotheses);
    Ok(completed)
}
