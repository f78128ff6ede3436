//! LSTM cell, bidirectional layers, flat and pyramidal encoder stacks and
//! the output projection, with hand-derived backpropagation through time.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{axpy, sigmoid, Gradients, Init, Matrix, NumericsError, ParamId, ParamStore};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EncoderError {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dim {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("input has {frames} frames; nothing left to encode")]
    TooShort { frames: usize },
    #[error("forward cache was computed for parameter version {cached}, store is at {current}")]
    StaleCache { cached: u64, current: u64 },
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("invalid encoder config: {0}")]
    Config(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

fn check_dim(what: &'static str, expected: usize, got: usize) -> Result<(), EncoderError> {
    if expected != got {
        return Err(EncoderError::Dim {
            what,
            expected,
            got,
        });
    }
    Ok(())
}

fn lookup(store: &ParamStore, name: &str) -> Result<ParamId, EncoderError> {
    store
        .id(name)
        .ok_or_else(|| EncoderError::MissingParam(name.to_string()))
}

/// Fetches `name` if present, otherwise registers it with `init`.
fn param(
    store: &mut ParamStore,
    name: &str,
    rows: usize,
    cols: usize,
    init: Init,
) -> Result<ParamId, EncoderError> {
    match store.id(name) {
        Some(id) => {
            check_dim("parameter rows", rows, store.tensor(id).rows())?;
            check_dim("parameter cols", cols, store.tensor(id).cols())?;
            Ok(id)
        }
        None => Ok(store.add(name, rows, cols, init)?),
    }
}

/// Handles to one LSTM cell's weights. Gate rows are ordered
/// input, forget, output, candidate.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmCell {
    pub w_x: ParamId,
    pub w_h: ParamId,
    pub b: ParamId,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

impl LstmCell {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        hidden_dim: usize,
    ) -> Result<Self, EncoderError> {
        let fan_in = input_dim + hidden_dim;
        let g = 4 * hidden_dim;
        Ok(LstmCell {
            w_x: param(store, &format!("{prefix}.w_x"), g, input_dim, Init::ScaledUniform { fan_in })?,
            w_h: param(store, &format!("{prefix}.w_h"), g, hidden_dim, Init::ScaledUniform { fan_in })?,
            b: param(store, &format!("{prefix}.b"), g, 1, Init::Zeros)?,
            input_dim,
            hidden_dim,
        })
    }

    pub fn lookup(store: &ParamStore, prefix: &str) -> Result<Self, EncoderError> {
        let w_x = lookup(store, &format!("{prefix}.w_x"))?;
        let w_h = lookup(store, &format!("{prefix}.w_h"))?;
        let b = lookup(store, &format!("{prefix}.b"))?;
        Ok(LstmCell {
            w_x,
            w_h,
            b,
            input_dim: store.tensor(w_x).cols(),
            hidden_dim: store.tensor(w_h).cols(),
        })
    }
}

/// Activations saved by one cell step.
#[derive(Clone, Debug)]
pub struct StepCache {
    x: Vec<f64>,
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    /// Post-activation gates `[i; f; o; g]`.
    gates: Vec<f64>,
    tanh_c: Vec<f64>,
}

/// One LSTM step: sigmoid gates, tanh candidate,
/// `c = f⊙c_prev + i⊙g`, `h = o⊙tanh(c)`.
pub fn lstm_cell_step(
    cell: &LstmCell,
    store: &ParamStore,
    x: &[f64],
    h_prev: &[f64],
    c_prev: &[f64],
) -> Result<(Vec<f64>, Vec<f64>, StepCache), EncoderError> {
    check_dim("lstm input", cell.input_dim, x.len())?;
    check_dim("lstm hidden state", cell.hidden_dim, h_prev.len())?;
    check_dim("lstm cell state", cell.hidden_dim, c_prev.len())?;
    let n = cell.hidden_dim;
    let mut gates = store.tensor(cell.b).data().to_vec();
    store.tensor(cell.w_x).matvec_acc(x, &mut gates);
    store.tensor(cell.w_h).matvec_acc(h_prev, &mut gates);
    for v in &mut gates[..3 * n] {
        *v = sigmoid(*v);
    }
    for v in &mut gates[3 * n..] {
        *v = v.tanh();
    }
    let mut c = vec![0.0; n];
    let mut h = vec![0.0; n];
    let mut tanh_c = vec![0.0; n];
    for k in 0..n {
        c[k] = gates[n + k] * c_prev[k] + gates[k] * gates[3 * n + k];
        tanh_c[k] = c[k].tanh();
        h[k] = gates[2 * n + k] * tanh_c[k];
    }
    let cache = StepCache {
        x: x.to_vec(),
        h_prev: h_prev.to_vec(),
        c_prev: c_prev.to_vec(),
        gates,
        tanh_c,
    };
    Ok((h, c, cache))
}

/// Backward through one step. `dh` and `dc` are the total gradients
/// arriving at this step's outputs; returns `(dx, dh_prev, dc_prev)`.
pub fn lstm_cell_step_backward(
    cell: &LstmCell,
    store: &ParamStore,
    cache: &StepCache,
    dh: &[f64],
    dc: &[f64],
    grads: &mut Gradients,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = cell.hidden_dim;
    let g = &cache.gates;
    let mut dz = vec![0.0; 4 * n];
    let mut dc_prev = vec![0.0; n];
    for k in 0..n {
        let (i, f, o, cand) = (g[k], g[n + k], g[2 * n + k], g[3 * n + k]);
        let tc = cache.tanh_c[k];
        let dct = dc[k] + dh[k] * o * (1.0 - tc * tc);
        dz[k] = dct * cand * i * (1.0 - i);
        dz[n + k] = dct * cache.c_prev[k] * f * (1.0 - f);
        dz[2 * n + k] = dh[k] * tc * o * (1.0 - o);
        dz[3 * n + k] = dct * i * (1.0 - cand * cand);
        dc_prev[k] = dct * f;
    }
    grads.get_mut(cell.w_x).add_outer(&dz, &cache.x);
    grads.get_mut(cell.w_h).add_outer(&dz, &cache.h_prev);
    axpy(1.0, &dz, grads.get_mut(cell.b).data_mut());
    let mut dx = vec![0.0; cell.input_dim];
    store.tensor(cell.w_x).matvec_t_acc(&dz, &mut dx);
    let mut dh_prev = vec![0.0; n];
    store.tensor(cell.w_h).matvec_t_acc(&dz, &mut dh_prev);
    (dx, dh_prev, dc_prev)
}

/// Runs a cell over every row of `inputs`, right-to-left when `reverse`.
/// Output row `t` is the hidden state after consuming input row `t`.
pub fn lstm_sequence_forward(
    cell: &LstmCell,
    store: &ParamStore,
    inputs: &Matrix,
    reverse: bool,
) -> Result<(Matrix, Vec<StepCache>), EncoderError> {
    check_dim("sequence feature", cell.input_dim, inputs.cols())?;
    let t_len = inputs.rows();
    let n = cell.hidden_dim;
    let mut out = Matrix::zeros(t_len, n);
    let mut caches = Vec::with_capacity(t_len);
    let mut h = vec![0.0; n];
    let mut c = vec![0.0; n];
    for step in 0..t_len {
        let t = if reverse { t_len - 1 - step } else { step };
        let (h_t, c_t, cache) = lstm_cell_step(cell, store, inputs.row(t), &h, &c)?;
        out.row_mut(t).copy_from_slice(&h_t);
        caches.push(cache);
        h = h_t;
        c = c_t;
    }
    Ok((out, caches))
}

/// BPTT for [`lstm_sequence_forward`]; returns the gradient wrt inputs.
pub fn lstm_sequence_backward(
    cell: &LstmCell,
    store: &ParamStore,
    caches: &[StepCache],
    d_out: &Matrix,
    reverse: bool,
    grads: &mut Gradients,
) -> Matrix {
    let t_len = caches.len();
    let n = cell.hidden_dim;
    let mut dx = Matrix::zeros(t_len, cell.input_dim);
    let mut dh_next = vec![0.0; n];
    let mut dc_next = vec![0.0; n];
    for step in (0..t_len).rev() {
        let t = if reverse { t_len - 1 - step } else { step };
        let mut dh = d_out.row(t).to_vec();
        axpy(1.0, &dh_next, &mut dh);
        let (dx_t, dh_prev, dc_prev) =
            lstm_cell_step_backward(cell, store, &caches[step], &dh, &dc_next, grads);
        dx.row_mut(t).copy_from_slice(&dx_t);
        dh_next = dh_prev;
        dc_next = dc_prev;
    }
    dx
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlstmLayer {
    pub forward: LstmCell,
    pub backward: LstmCell,
}

impl BlstmLayer {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        hidden_dim: usize,
    ) -> Result<Self, EncoderError> {
        Ok(BlstmLayer {
            forward: LstmCell::register(store, &format!("{prefix}.fwd"), input_dim, hidden_dim)?,
            backward: LstmCell::register(store, &format!("{prefix}.bwd"), input_dim, hidden_dim)?,
        })
    }

    pub fn hidden_dim(&self) -> usize {
        self.forward.hidden_dim
    }

    pub fn input_dim(&self) -> usize {
        self.forward.input_dim
    }
}

#[derive(Clone, Debug)]
pub struct BlstmCache {
    fwd: Vec<StepCache>,
    bwd: Vec<StepCache>,
}

/// Output row `t` is `[h→_t ; h←_t]`.
pub fn blstm_layer_forward(
    layer: &BlstmLayer,
    store: &ParamStore,
    inputs: &Matrix,
) -> Result<(Matrix, BlstmCache), EncoderError> {
    let (hf, fwd) = lstm_sequence_forward(&layer.forward, store, inputs, false)?;
    let (hb, bwd) = lstm_sequence_forward(&layer.backward, store, inputs, true)?;
    let n = layer.hidden_dim();
    let mut out = Matrix::zeros(inputs.rows(), 2 * n);
    for t in 0..inputs.rows() {
        let row = out.row_mut(t);
        row[..n].copy_from_slice(hf.row(t));
        row[n..].copy_from_slice(hb.row(t));
    }
    Ok((out, BlstmCache { fwd, bwd }))
}

pub fn blstm_layer_backward(
    layer: &BlstmLayer,
    store: &ParamStore,
    cache: &BlstmCache,
    d_out: &Matrix,
    grads: &mut Gradients,
) -> Matrix {
    let n = layer.hidden_dim();
    let t_len = d_out.rows();
    let mut df = Matrix::zeros(t_len, n);
    let mut db = Matrix::zeros(t_len, n);
    for t in 0..t_len {
        df.row_mut(t).copy_from_slice(&d_out.row(t)[..n]);
        db.row_mut(t).copy_from_slice(&d_out.row(t)[n..]);
    }
    let mut dx = lstm_sequence_backward(&layer.forward, store, &cache.fwd, &df, false, grads);
    let dx_b = lstm_sequence_backward(&layer.backward, store, &cache.bwd, &db, true, grads);
    dx.add_scaled(&dx_b, 1.0);
    dx
}

/// Concatenates groups of `step` consecutive frames; a trailing partial
/// group is zero-padded.
pub fn pyramid_subsample(inputs: &Matrix, step: usize) -> Matrix {
    assert!(step >= 1, "pyramid step must be >= 1");
    let d = inputs.cols();
    let out_len = inputs.rows().div_ceil(step);
    let mut out = Matrix::zeros(out_len, step * d);
    for t in 0..inputs.rows() {
        let (u, k) = (t / step, t % step);
        out.row_mut(u)[k * d..(k + 1) * d].copy_from_slice(inputs.row(t));
    }
    out
}

/// Routes gradients of [`pyramid_subsample`] back to the `orig_len` input
/// frames; padding receives nothing.
pub fn pyramid_subsample_backward(d_out: &Matrix, orig_len: usize, step: usize) -> Matrix {
    let d = d_out.cols() / step;
    let mut dx = Matrix::zeros(orig_len, d);
    for t in 0..orig_len {
        let (u, k) = (t / step, t % step);
        dx.row_mut(t).copy_from_slice(&d_out.row(u)[k * d..(k + 1) * d]);
    }
    dx
}

/// Time length after `layers` pyramid reductions by `step`.
pub fn pyramid_output_len(t: usize, step: usize, layers: usize) -> usize {
    (0..layers).fold(t, |len, _| len.div_ceil(step))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Flat,
    Pyramidal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub input_dim: usize,
    pub layers: usize,
    pub units_per_direction: usize,
    pub pyramid_step: usize,
    pub dropout_rate: f64,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        if self.layers == 0 || self.units_per_direction == 0 || self.input_dim == 0 {
            return Err(EncoderError::Config(
                "layers, units and input_dim must be >= 1".into(),
            ));
        }
        if self.pyramid_step == 0 {
            return Err(EncoderError::Config("pyramid_step must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(EncoderError::Config(format!(
                "dropout_rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    pub fn output_dim(&self) -> usize {
        2 * self.units_per_direction
    }

    fn step(&self) -> usize {
        match self.kind {
            EncoderKind::Flat => 1,
            EncoderKind::Pyramidal => self.pyramid_step,
        }
    }

    pub fn output_len(&self, frames: usize) -> usize {
        pyramid_output_len(frames, self.step(), self.layers)
    }
}

/// A stack of BLSTM layers. The pyramidal kind subsamples before every
/// layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub layers: Vec<BlstmLayer>,
}

impl Encoder {
    pub fn register(store: &mut ParamStore, prefix: &str, cfg: &EncoderConfig) -> Result<Self, EncoderError> {
        cfg.validate()?;
        let step = cfg.step();
        let mut layers = Vec::with_capacity(cfg.layers);
        let mut dim = cfg.input_dim;
        for l in 0..cfg.layers {
            let layer = BlstmLayer::register(
                store,
                &format!("{prefix}.l{l}"),
                dim * step,
                cfg.units_per_direction,
            )?;
            layers.push(layer);
            dim = cfg.output_dim();
        }
        Ok(Encoder {
            cfg: cfg.clone(),
            layers,
        })
    }
}

#[derive(Clone, Debug)]
struct LayerCache {
    in_len: usize,
    blstm: BlstmCache,
    dropout_mask: Option<Vec<f64>>,
}

/// Forward state needed by [`encoder_backward`].
#[derive(Clone, Debug)]
pub struct EncoderCache {
    version: u64,
    input_len: usize,
    layers: Vec<LayerCache>,
}

fn dropout_mask(rng: &mut ChaCha8Rng, len: usize, rate: f64) -> Vec<f64> {
    let keep = 1.0 / (1.0 - rate);
    (0..len)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect()
}

/// Encodes a `T × D` feature matrix. Dropout is applied to each layer's
/// output only when `dropout` supplies an RNG (training mode).
pub fn encoder_forward(
    enc: &Encoder,
    store: &ParamStore,
    features: &Matrix,
    mut dropout: Option<&mut ChaCha8Rng>,
) -> Result<(Matrix, EncoderCache), EncoderError> {
    check_dim("encoder input", enc.cfg.input_dim, features.cols())?;
    if features.rows() == 0 {
        return Err(EncoderError::TooShort { frames: 0 });
    }
    let step = enc.cfg.step();
    let mut x = features.clone();
    let mut caches = Vec::with_capacity(enc.layers.len());
    for layer in &enc.layers {
        let in_len = x.rows();
        let input = if step > 1 { pyramid_subsample(&x, step) } else { x };
        let (mut out, blstm) = blstm_layer_forward(layer, store, &input)?;
        let dropout_mask = match dropout.as_deref_mut() {
            Some(rng) if enc.cfg.dropout_rate > 0.0 => {
                let mask = dropout_mask(rng, out.data().len(), enc.cfg.dropout_rate);
                for (v, m) in out.data_mut().iter_mut().zip(&mask) {
                    *v *= m;
                }
                Some(mask)
            }
            _ => None,
        };
        caches.push(LayerCache {
            in_len,
            blstm,
            dropout_mask,
        });
        x = out;
    }
    Ok((
        x,
        EncoderCache {
            version: store.version(),
            input_len: features.rows(),
            layers: caches,
        },
    ))
}

/// Accumulates parameter gradients for `d_out` (the loss gradient wrt the
/// encoder output) and returns the gradient wrt the input features.
pub fn encoder_backward(
    enc: &Encoder,
    store: &ParamStore,
    cache: EncoderCache,
    d_out: &Matrix,
    grads: &mut Gradients,
) -> Result<Matrix, EncoderError> {
    if cache.version != store.version() {
        return Err(EncoderError::StaleCache {
            cached: cache.version,
            current: store.version(),
        });
    }
    let step = enc.cfg.step();
    let mut d = d_out.clone();
    for (layer, lc) in enc.layers.iter().zip(cache.layers).rev() {
        if let Some(mask) = &lc.dropout_mask {
            for (v, m) in d.data_mut().iter_mut().zip(mask) {
                *v *= m;
            }
        }
        let d_in = blstm_layer_backward(layer, store, &lc.blstm, &d, grads);
        d = if step > 1 {
            pyramid_subsample_backward(&d_in, lc.in_len, step)
        } else {
            d_in
        };
    }
    debug_assert_eq!(d.rows(), cache.input_len);
    Ok(d)
}

/// `y = W_fwd·h_fwd + W_bwd·h_bwd + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct OutputProjection {
    pub w_fwd: ParamId,
    pub w_bwd: ParamId,
    pub b: ParamId,
    pub hidden_dim: usize,
    pub output_dim: usize,
}

impl OutputProjection {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        hidden_dim: usize,
        output_dim: usize,
    ) -> Result<Self, EncoderError> {
        let init = Init::ScaledUniform {
            fan_in: 2 * hidden_dim,
        };
        Ok(OutputProjection {
            w_fwd: param(store, &format!("{prefix}.w_fwd"), output_dim, hidden_dim, init)?,
            w_bwd: param(store, &format!("{prefix}.w_bwd"), output_dim, hidden_dim, init)?,
            b: param(store, &format!("{prefix}.b"), output_dim, 1, Init::Zeros)?,
            hidden_dim,
            output_dim,
        })
    }
}

pub fn output_projection(
    proj: &OutputProjection,
    store: &ParamStore,
    h_fwd: &[f64],
    h_bwd: &[f64],
) -> Result<Vec<f64>, EncoderError> {
    check_dim("projection forward input", proj.hidden_dim, h_fwd.len())?;
    check_dim("projection backward input", proj.hidden_dim, h_bwd.len())?;
    let mut y = store.tensor(proj.b).data().to_vec();
    store.tensor(proj.w_fwd).matvec_acc(h_fwd, &mut y);
    store.tensor(proj.w_bwd).matvec_acc(h_bwd, &mut y);
    Ok(y)
}

/// Applies the projection to every row of a `T × 2H` encoder output.
pub fn project_sequence(
    proj: &OutputProjection,
    store: &ParamStore,
    h: &Matrix,
) -> Result<Matrix, EncoderError> {
    check_dim("projection input", 2 * proj.hidden_dim, h.cols())?;
    let n = proj.hidden_dim;
    let mut out = Matrix::zeros(h.rows(), proj.output_dim);
    for t in 0..h.rows() {
        let y = output_projection(proj, store, &h.row(t)[..n], &h.row(t)[n..])?;
        out.row_mut(t).copy_from_slice(&y);
    }
    Ok(out)
}

/// Gradient of [`project_sequence`]: accumulates weight gradients and
/// returns the gradient wrt `h`.
pub fn project_sequence_backward(
    proj: &OutputProjection,
    store: &ParamStore,
    h: &Matrix,
    d_y: &Matrix,
    grads: &mut Gradients,
) -> Matrix {
    let n = proj.hidden_dim;
    let mut dh = Matrix::zeros(h.rows(), 2 * n);
    for t in 0..h.rows() {
        let dy = d_y.row(t);
        grads.get_mut(proj.w_fwd).add_outer(dy, &h.row(t)[..n]);
        grads.get_mut(proj.w_bwd).add_outer(dy, &h.row(t)[n..]);
        axpy(1.0, dy, grads.get_mut(proj.b).data_mut());
        let row = dh.row_mut(t);
        store.tensor(proj.w_fwd).matvec_t_acc(dy, &mut row[..n]);
        store.tensor(proj.w_bwd).matvec_t_acc(dy, &mut row[n..]);
    }
    dh
}
