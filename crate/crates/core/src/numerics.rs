//! Dense linear algebra, log-domain helpers, parameter storage, SGD and a
//! finite-difference gradient checker shared by every trainable module.

use std::collections::HashMap;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("log_sum_exp of an empty slice")]
    EmptyInput,
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    Shape {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("duplicate parameter name `{0}`")]
    DuplicateParam(String),
    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("learning rate must be positive, got {0}")]
    BadLearningRate(f64),
    #[error("loss function is not deterministic: {first} != {second}")]
    NonDeterministicLoss { first: f64, second: f64 },
    #[error("epsilon must be positive, got {0}")]
    BadEpsilon(f64),
    #[error("noise sigma must be non-negative, got {0}")]
    NegativeSigma(f64),
}

/// Row-major dense matrix of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NumericsError> {
        if data.len() != rows * cols {
            return Err(NumericsError::Shape {
                expected: (rows, cols),
                got: (data.len(), 1),
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Builds a matrix from equally sized rows. Panics on ragged input.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Matrix {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn column(values: &[f64]) -> Self {
        Matrix {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    /// `self += s * other`
    pub fn add_scaled(&mut self, other: &Matrix, s: f64) {
        assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// `out += self · x`
    #[inline]
    pub fn matvec_acc(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (r, o) in out.iter_mut().enumerate() {
            *o += dot(self.row(r), x);
        }
    }

    /// `out += selfᵀ · y`
    #[inline]
    pub fn matvec_t_acc(&self, y: &[f64], out: &mut [f64]) {
        debug_assert_eq!(y.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        for (r, &yr) in y.iter().enumerate() {
            if yr == 0.0 {
                continue;
            }
            axpy(yr, self.row(r), out);
        }
    }

    /// `self += a · bᵀ`
    #[inline]
    pub fn add_outer(&mut self, a: &[f64], b: &[f64]) {
        debug_assert_eq!(a.len(), self.rows);
        debug_assert_eq!(b.len(), self.cols);
        for (r, &ar) in a.iter().enumerate() {
            if ar == 0.0 {
                continue;
            }
            axpy(ar, b, self.row_mut(r));
        }
    }

    /// Rows `[start, end)` as a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Matrix {
        Matrix {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += alpha * x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Stable `log(exp(a) + exp(b))`.
#[inline]
pub fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// `log Σ exp(v_i)` by max-shifting. Entries may be `-inf`.
pub fn log_sum_exp(values: &[f64]) -> Result<f64, NumericsError> {
    let max = values
        .iter()
        .copied()
        .fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v))))
        .ok_or(NumericsError::EmptyInput)?;
    if max == f64::NEG_INFINITY {
        return Ok(f64::NEG_INFINITY);
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    Ok(max + sum.ln())
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= sum);
    out
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|v| (v - max).exp()).sum();
    let norm = max + sum.ln();
    logits.iter().map(|v| v - norm).collect()
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Result of [`cross_entropy`]. A zero probability at the target gives
/// `loss == +inf` with `degenerate` set.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CrossEntropy {
    pub loss: f64,
    pub degenerate: bool,
}

pub fn cross_entropy(dist: &[f64], target: usize) -> CrossEntropy {
    assert!(target < dist.len(), "target {target} out of range");
    let p = dist[target];
    if p <= 0.0 {
        return CrossEntropy {
            loss: f64::INFINITY,
            degenerate: true,
        };
    }
    CrossEntropy {
        loss: (-p.ln()).max(0.0),
        degenerate: false,
    }
}

/// Handle to a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    /// Uniform in `[-r, r]` with `r = 1/sqrt(fan_in)`.
    ScaledUniform { fan_in: usize },
    Uniform(f64),
}

/// Gradient buffers parallel to the tensors of a [`ParamStore`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    bufs: Vec<Matrix>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.bufs[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.bufs[id.0]
    }

    pub fn len(&self) -> usize {
        self.bufs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bufs.is_empty()
    }

    pub fn add_scaled(&mut self, other: &Gradients, s: f64) {
        for (a, b) in self.bufs.iter_mut().zip(&other.bufs) {
            a.add_scaled(b, s);
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.bufs.iter_mut().for_each(|m| m.scale(s));
    }

    pub fn zero(&mut self) {
        self.bufs.iter_mut().for_each(|m| m.fill(0.0));
    }

    pub fn norm(&self) -> f64 {
        self.bufs.iter().map(Matrix::sum_squares).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.bufs.iter().all(Matrix::is_finite)
    }
}

/// Named parameter tensors with paired gradient buffers.
///
/// Every mutation of tensor values bumps [`ParamStore::version`], which lets
/// forward caches detect that they were computed against stale weights.
#[derive(Clone, Debug)]
pub struct ParamStore {
    names: Vec<String>,
    index: HashMap<String, ParamId>,
    tensors: Vec<Matrix>,
    grads: Gradients,
    rng_seed: u64,
    rng: ChaCha8Rng,
    version: u64,
}

impl ParamStore {
    pub fn new(rng_seed: u64) -> Self {
        ParamStore {
            names: Vec::new(),
            index: HashMap::new(),
            tensors: Vec::new(),
            grads: Gradients::default(),
            rng_seed,
            rng: ChaCha8Rng::seed_from_u64(rng_seed),
            version: 0,
        }
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    pub fn add(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        init: Init,
    ) -> Result<ParamId, NumericsError> {
        let mut m = Matrix::zeros(rows, cols);
        let r = match init {
            Init::Zeros => 0.0,
            Init::ScaledUniform { fan_in } => 1.0 / (fan_in.max(1) as f64).sqrt(),
            Init::Uniform(r) => r,
        };
        if r > 0.0 {
            for v in m.data_mut() {
                *v = self.rng.random_range(-r..=r);
            }
        }
        self.insert(name, m)
    }

    pub fn insert(&mut self, name: &str, tensor: Matrix) -> Result<ParamId, NumericsError> {
        if self.index.contains_key(name) {
            return Err(NumericsError::DuplicateParam(name.to_string()));
        }
        let id = ParamId(self.tensors.len());
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), id);
        self.grads.bufs.push(Matrix::zeros(tensor.rows, tensor.cols));
        self.tensors.push(tensor);
        self.version += 1;
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    #[inline]
    pub fn tensor(&self, id: ParamId) -> &Matrix {
        &self.tensors[id.0]
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Matrix {
        self.version += 1;
        &mut self.tensors[id.0]
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn grads(&self) -> &Gradients {
        &self.grads
    }

    pub fn grads_mut(&mut self) -> &mut Gradients {
        &mut self.grads
    }

    /// Fresh zeroed gradient buffers with this store's shapes.
    pub fn zeros_like(&self) -> Gradients {
        Gradients {
            bufs: self
                .tensors
                .iter()
                .map(|t| Matrix::zeros(t.rows, t.cols))
                .collect(),
        }
    }

    pub fn zero_grad(&mut self) {
        self.grads.zero();
    }

    pub fn accumulate(&mut self, g: &Gradients) {
        self.grads.add_scaled(g, 1.0);
    }

    /// Runs `f` with shared access to the values and exclusive access to
    /// the gradient buffers.
    pub fn with_grads<R>(&mut self, f: impl FnOnce(&ParamStore, &mut Gradients) -> R) -> R {
        let mut grads = std::mem::take(&mut self.grads);
        let out = f(self, &mut grads);
        self.grads = grads;
        out
    }
}

/// `w ← w − lr·g` for every tensor, then zero the gradients.
pub fn sgd_step(params: &mut ParamStore, learning_rate: f64) -> Result<(), NumericsError> {
    if !(learning_rate > 0.0) {
        return Err(NumericsError::BadLearningRate(learning_rate));
    }
    if let Some(i) = params.grads.bufs.iter().position(|g| !g.is_finite()) {
        return Err(NumericsError::NonFiniteGradient(params.names[i].clone()));
    }
    for (t, g) in params.tensors.iter_mut().zip(&params.grads.bufs) {
        t.add_scaled(g, -learning_rate);
    }
    params.version += 1;
    params.zero_grad();
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckEntry {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Smallest nonzero analytic magnitude among checked scalars (`inf` if
    /// all are zero). Central differences carry roughly `ulp(loss) / ε` of
    /// rounding noise, so relative errors on scalars near that level say
    /// nothing about the derivation.
    pub min_abs_analytic: f64,
    pub worst: Option<GradCheckEntry>,
}

/// `|a − n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares the analytic gradients already stored in `params` against
/// central differences of `loss_fn`.
///
/// `sample` scalars are drawn (seeded by the store's seed) from all
/// parameters; a `sample` at least as large as the parameter count checks
/// every scalar.
pub fn grad_check(
    loss_fn: &mut dyn FnMut(&ParamStore) -> f64,
    params: &mut ParamStore,
    epsilon: f64,
    sample: usize,
) -> Result<GradCheckReport, NumericsError> {
    if !(epsilon > 0.0) {
        return Err(NumericsError::BadEpsilon(epsilon));
    }
    let first = loss_fn(params);
    let second = loss_fn(params);
    if first.to_bits() != second.to_bits() {
        return Err(NumericsError::NonDeterministicLoss { first, second });
    }

    let mut coords = Vec::new();
    for (p, t) in params.tensors.iter().enumerate() {
        for i in 0..t.data.len() {
            coords.push((p, i));
        }
    }
    let chosen: Vec<(usize, usize)> = if sample >= coords.len() {
        coords
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(params.rng_seed ^ 0x9e37_79b9_7f4a_7c15);
        let mut picks: Vec<usize> = index::sample(&mut rng, coords.len(), sample).into_vec();
        picks.sort_unstable();
        picks.into_iter().map(|k| coords[k]).collect()
    };

    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        min_abs_analytic: f64::INFINITY,
        worst: None,
    };
    for (p, i) in chosen {
        let id = ParamId(p);
        let orig = params.tensors[p].data[i];
        params.tensor_mut(id).data[i] = orig + epsilon;
        let plus = loss_fn(params);
        params.tensor_mut(id).data[i] = orig - epsilon;
        let minus = loss_fn(params);
        params.tensor_mut(id).data[i] = orig;
        let numeric = (plus - minus) / (2.0 * epsilon);
        let analytic = params.grads.bufs[p].data[i];
        let rel = relative_error(analytic, numeric);
        report.checked += 1;
        report.max_abs_error = report.max_abs_error.max((analytic - numeric).abs());
        if analytic != 0.0 {
            report.min_abs_analytic = report.min_abs_analytic.min(analytic.abs());
        }
        if report.worst.is_none() || rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = Some(GradCheckEntry {
                param: params.names[p].clone(),
                index: i,
                analytic,
                numeric,
                rel_error: rel,
            });
        }
    }
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseConfig {
    sigma: f64,
    pub seed: u64,
}

impl NoiseConfig {
    pub fn new(sigma: f64, seed: u64) -> Result<Self, NumericsError> {
        if !(sigma >= 0.0) {
            return Err(NumericsError::NegativeSigma(sigma));
        }
        Ok(NoiseConfig { sigma, seed })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }
}

/// Adds i.i.d. `N(0, sigma²)` to every cell, drawn from `cfg.seed`.
pub fn add_gaussian_noise(features: &Matrix, cfg: &NoiseConfig) -> Matrix {
    let mut out = features.clone();
    if cfg.sigma == 0.0 {
        return out;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0, cfg.sigma).expect("sigma validated");
    for v in out.data_mut() {
        *v += normal.sample(&mut rng);
    }
    out
}

/// Training-time randomness: Gaussian input noise and dropout masks, both
/// drawn from `rng`. Passing no `TrainMode` means evaluation.
#[derive(Debug)]
pub struct TrainMode<'a> {
    pub rng: &'a mut ChaCha8Rng,
    pub noise_sigma: f64,
}

impl TrainMode<'_> {
    /// Adds this mode's noise to `features` with a seed drawn from the RNG.
    pub fn perturb(&mut self, features: &Matrix) -> Result<Matrix, NumericsError> {
        let cfg = NoiseConfig::new(self.noise_sigma, self.rng.random())?;
        Ok(add_gaussian_noise(features, &cfg))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn log_sum_exp_fixtures() {
        assert!((log_sum_exp(&[0.0, 0.0]).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY, 5.0]).unwrap(), 5.0);
        assert_eq!(
            log_sum_exp(&[f64::NEG_INFINITY, f64::NEG_INFINITY]).unwrap(),
            f64::NEG_INFINITY
        );
        assert_eq!(log_sum_exp(&[]), Err(NumericsError::EmptyInput));
    }

    #[test]
    fn log_sum_exp_large_values() {
        // 1000 + ln 3, ln 3 = 1.098612288668109691395... (extended precision)
        let v = log_sum_exp(&[1000.0, 1000.0, 1000.0]).unwrap();
        assert!((v - (1000.0 + 1.098_612_288_668_109_7)).abs() < 1e-12);
    }

    #[test]
    fn softmax_fixtures() {
        assert_eq!(softmax(&[0.0, 0.0]), vec![0.5, 0.5]);
        assert_eq!(softmax(&[42.0]), vec![1.0]);
        let p = softmax(&[1f64.ln(), 3f64.ln()]);
        assert!((p[0] - 0.25).abs() < 1e-15 && (p[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_fixtures() {
        assert_eq!(cross_entropy(&[0.0, 1.0, 0.0], 1).loss, 0.0);
        let k = 7;
        let u = vec![1.0 / k as f64; k];
        assert!((cross_entropy(&u, 3).loss - (k as f64).ln()).abs() < 1e-12);
        assert!((cross_entropy(&[0.25, 0.75], 1).loss - 0.287_682_072_451_780_9).abs() < 1e-12);
        let d = cross_entropy(&[1.0, 0.0], 1);
        assert!(d.degenerate && d.loss.is_infinite());
    }

    fn scalar_store(w: f64) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new(1);
        let id = s.insert("w", Matrix::column(&[w])).unwrap();
        (s, id)
    }

    #[test]
    fn grad_check_quadratic() {
        let (mut s, id) = scalar_store(3.0);
        s.grads_mut().get_mut(id).set(0, 0, 6.0);
        let r = grad_check(&mut |p| p.tensor(id).get(0, 0).powi(2), &mut s, 1e-5, 10).unwrap();
        assert_eq!(r.checked, 1);
        assert!(r.max_rel_error <= 1e-8, "{r:?}");
    }

    #[test]
    fn grad_check_constant_and_linear() {
        let (mut s, _) = scalar_store(0.3);
        let r = grad_check(&mut |_| 4.0, &mut s, 1e-5, 10).unwrap();
        assert_eq!(r.worst.as_ref().unwrap().numeric, 0.0);
        assert_eq!(r.max_rel_error, 0.0);

        for w in [-2.0, 0.0, 11.0] {
            let (mut s, id) = scalar_store(w);
            s.grads_mut().get_mut(id).set(0, 0, 2.0);
            let r = grad_check(&mut |p| 2.0 * p.tensor(id).get(0, 0), &mut s, 1e-5, 1).unwrap();
            assert!(r.max_rel_error < 1e-9);
        }
    }

    #[test]
    fn grad_check_rejects_nondeterminism() {
        let (mut s, _) = scalar_store(1.0);
        let mut calls = 0.0;
        let err = grad_check(
            &mut |_| {
                calls += 1.0;
                calls
            },
            &mut s,
            1e-5,
            1,
        )
        .unwrap_err();
        assert!(matches!(err, NumericsError::NonDeterministicLoss { .. }));
    }

    #[test]
    fn sgd_fixtures() {
        let (mut s, id) = scalar_store(1.0);
        s.grads_mut().get_mut(id).set(0, 0, 0.5);
        sgd_step(&mut s, 0.1).unwrap();
        assert!((s.tensor(id).get(0, 0) - 0.95).abs() < 1e-15);
        assert_eq!(s.grads().get(id).get(0, 0), 0.0);

        sgd_step(&mut s, 0.1).unwrap();
        assert_eq!(s.tensor(id).get(0, 0), 0.95);

        let (mut s, id) = scalar_store(1.0);
        for lr in [0.1, 0.01] {
            s.grads_mut().get_mut(id).set(0, 0, 1.0);
            sgd_step(&mut s, lr).unwrap();
        }
        assert!((s.tensor(id).get(0, 0) - 0.89).abs() < 1e-15);
    }

    #[test]
    fn sgd_reports_nan_parameter() {
        let (mut s, id) = scalar_store(1.0);
        s.grads_mut().get_mut(id).set(0, 0, f64::NAN);
        assert_eq!(
            sgd_step(&mut s, 0.1),
            Err(NumericsError::NonFiniteGradient("w".into()))
        );
        assert_eq!(sgd_step(&mut s, 0.0), Err(NumericsError::BadLearningRate(0.0)));
    }

    #[test]
    fn noise_fixtures() {
        let base = Matrix::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0]]);
        assert_eq!(add_gaussian_noise(&base, &NoiseConfig::new(0.0, 9).unwrap()), base);
        let cfg = NoiseConfig::new(0.6, 9).unwrap();
        assert_eq!(add_gaussian_noise(&base, &cfg), add_gaussian_noise(&base, &cfg));
        assert!(NoiseConfig::new(-0.1, 0).is_err());
    }

    #[test]
    fn noise_sample_std() {
        let base = Matrix::zeros(1000, 100);
        let out = add_gaussian_noise(&base, &NoiseConfig::new(0.6, 2024).unwrap());
        let n = out.data().len() as f64;
        let mean = out.data().iter().sum::<f64>() / n;
        let var = out.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let std = var.sqrt();
        assert!((0.594..=0.606).contains(&std), "std {std}");
    }

    #[test]
    fn param_store_init_is_seeded() {
        let build = |seed| {
            let mut s = ParamStore::new(seed);
            s.add("a", 3, 4, Init::ScaledUniform { fan_in: 4 }).unwrap();
            s
        };
        let a = build(5);
        assert_eq!(a.tensor(a.id("a").unwrap()), build(5).tensor(a.id("a").unwrap()));
        assert!(a.tensor(ParamId(0)).data().iter().all(|v| v.abs() <= 0.5));
        let mut a = a;
        assert!(a.add("a", 1, 1, Init::Zeros).is_err());
    }

    proptest! {
        #[test]
        fn log_sum_exp_shift_invariant(v in prop::collection::vec(-50.0f64..50.0, 1..12), c in -100.0f64..100.0) {
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let a = log_sum_exp(&shifted).unwrap();
            let b = log_sum_exp(&v).unwrap() + c;
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }

        #[test]
        fn softmax_preserves_argmax(v in prop::collection::vec(-20.0f64..20.0, 1..12)) {
            let p = softmax(&v);
            prop_assert_eq!(argmax(&p), argmax(&v));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(p.iter().all(|&x| x > 0.0));
        }

        #[test]
        fn cross_entropy_nonnegative(v in prop::collection::vec(-10.0f64..10.0, 2..8), t in 0usize..8) {
            let t = t % v.len();
            prop_assert!(cross_entropy(&softmax(&v), t).loss >= 0.0);
        }
    }
}
