//! Connectionist temporal classification: log-space forward-backward loss,
//! exact gradients, a brute-force enumeration oracle, best-path decoding
//! and the DBLSTM acoustic model trained with it.
//!
//! The blank is always the last output index.

use thiserror::Error;

use crate::encoder::{
    encoder_backward, encoder_forward, project_sequence, project_sequence_backward, Encoder,
    EncoderConfig, EncoderError, OutputProjection,
};
use crate::hypothesis::Hypothesis;
use crate::numerics::{
    log_add, log_softmax, log_sum_exp, Gradients, Matrix, NumericsError, ParamStore, TrainMode,
};

const NORM_TOLERANCE: f64 = 1e-9;
const BRUTEFORCE_LIMIT: u128 = 1_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CtcError {
    #[error("target of length {target_len} needs at least {required} frames, got {frames}")]
    Infeasible {
        frames: usize,
        target_len: usize,
        required: usize,
    },
    #[error("target has zero probability under the model")]
    ZeroProbability,
    #[error("empty target")]
    EmptyTarget,
    #[error("label {label} is out of range for {classes} classes (blank {blank})")]
    LabelOutOfRange {
        label: usize,
        classes: usize,
        blank: usize,
    },
    #[error("row {frame} of log_probs does not normalize (log-sum {log_sum})")]
    NotNormalized { frame: usize, log_sum: f64 },
    #[error("brute force over {paths} paths exceeds the limit of {BRUTEFORCE_LIMIT}")]
    TooLarge { paths: u128 },
    #[error("lattice shape {lattice:?} does not match log_probs {log_probs:?}")]
    LatticeMismatch {
        lattice: (usize, usize),
        log_probs: (usize, usize),
    },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Merges repeated labels, then removes blanks.
pub fn collapse_alignment(alignment: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &a in alignment {
        if Some(a) != prev && a != blank {
            out.push(a);
        }
        prev = Some(a);
    }
    out
}

/// Minimum number of frames an alignment of `target` needs: one per label
/// plus a blank between each pair of equal neighbours.
pub fn required_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Forward and backward log-probability grids over the blank-interleaved
/// target `φ l1 φ l2 … φ`.
///
/// `alpha[s][t]` includes the emission at `t`; `beta[s][t]` covers frames
/// after `t` only, so `alpha + beta` summed over states equals `log P` at
/// every frame.
#[derive(Clone, Debug)]
pub struct CtcLattice {
    labels: Vec<usize>,
    alpha: Matrix,
    beta: Matrix,
    log_likelihood: f64,
    classes: usize,
}

impl CtcLattice {
    pub fn expanded_labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn alpha(&self) -> &Matrix {
        &self.alpha
    }

    pub fn beta(&self) -> &Matrix {
        &self.beta
    }

    pub fn frames(&self) -> usize {
        self.alpha.cols()
    }

    pub fn log_likelihood(&self) -> f64 {
        self.log_likelihood
    }

    /// `log_sum_exp_s(alpha_t(s) + beta_t(s))` for frame `t`.
    pub fn frame_total(&self, t: usize) -> f64 {
        let v: Vec<f64> = (0..self.labels.len())
            .map(|s| self.alpha.get(s, t) + self.beta.get(s, t))
            .collect();
        log_sum_exp(&v).expect("lattice has states")
    }
}

fn validate(log_probs: &Matrix, target: &[usize]) -> Result<usize, CtcError> {
    let classes = log_probs.cols();
    let blank = classes - 1;
    if target.is_empty() {
        return Err(CtcError::EmptyTarget);
    }
    if let Some(&label) = target.iter().find(|&&l| l >= blank) {
        return Err(CtcError::LabelOutOfRange {
            label,
            classes,
            blank,
        });
    }
    for t in 0..log_probs.rows() {
        let s = log_sum_exp(log_probs.row(t)).expect("non-empty row");
        if !(s.abs() <= NORM_TOLERANCE) {
            return Err(CtcError::NotNormalized {
                frame: t,
                log_sum: s,
            });
        }
    }
    let required = required_frames(target);
    if log_probs.rows() < required {
        return Err(CtcError::Infeasible {
            frames: log_probs.rows(),
            target_len: target.len(),
            required,
        });
    }
    Ok(blank)
}

/// `−log Σ_{a ∈ B⁻¹(target)} P(a | x)` over per-frame log distributions
/// `log_probs` (`T × (V+1)`, blank last).
pub fn ctc_loss(log_probs: &Matrix, target: &[usize]) -> Result<(f64, CtcLattice), CtcError> {
    let blank = validate(log_probs, target)?;
    let t_len = log_probs.rows();
    let mut labels = Vec::with_capacity(2 * target.len() + 1);
    labels.push(blank);
    for &l in target {
        labels.push(l);
        labels.push(blank);
    }
    let s_len = labels.len();
    // l'_s may come from l'_{s-2} when it is a label distinct from it
    let skip: Vec<bool> = (0..s_len)
        .map(|s| s >= 2 && labels[s] != blank && labels[s] != labels[s - 2])
        .collect();

    let ninf = f64::NEG_INFINITY;
    let mut alpha = Matrix::zeros(s_len, t_len);
    alpha.fill(ninf);
    alpha.set(0, 0, log_probs.get(0, blank));
    alpha.set(1, 0, log_probs.get(0, labels[1]));
    for t in 1..t_len {
        for s in 0..s_len {
            let mut a = alpha.get(s, t - 1);
            if s >= 1 {
                a = log_add(a, alpha.get(s - 1, t - 1));
            }
            if skip[s] {
                a = log_add(a, alpha.get(s - 2, t - 1));
            }
            if a > ninf {
                alpha.set(s, t, a + log_probs.get(t, labels[s]));
            }
        }
    }

    let mut beta = Matrix::zeros(s_len, t_len);
    beta.fill(ninf);
    beta.set(s_len - 1, t_len - 1, 0.0);
    beta.set(s_len - 2, t_len - 1, 0.0);
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let mut b = beta.get(s, t + 1) + log_probs.get(t + 1, labels[s]);
            if s + 1 < s_len {
                b = log_add(b, beta.get(s + 1, t + 1) + log_probs.get(t + 1, labels[s + 1]));
            }
            if s + 2 < s_len && skip[s + 2] {
                b = log_add(b, beta.get(s + 2, t + 1) + log_probs.get(t + 1, labels[s + 2]));
            }
            beta.set(s, t, b);
        }
    }

    let log_likelihood = log_add(alpha.get(s_len - 1, t_len - 1), alpha.get(s_len - 2, t_len - 1));
    if log_likelihood == ninf {
        return Err(CtcError::ZeroProbability);
    }
    let lattice = CtcLattice {
        labels,
        alpha,
        beta,
        log_likelihood,
        classes: log_probs.cols(),
    };
    Ok(((-log_likelihood).max(0.0), lattice))
}

/// Literal enumeration of all `(V+1)^T` alignments. Returns `+inf` when no
/// alignment collapses to `target`.
pub fn ctc_loss_bruteforce(log_probs: &Matrix, target: &[usize]) -> Result<f64, CtcError> {
    let (t_len, classes) = log_probs.shape();
    let paths = (classes as u128).checked_pow(t_len as u32).unwrap_or(u128::MAX);
    if paths > BRUTEFORCE_LIMIT {
        return Err(CtcError::TooLarge { paths });
    }
    let blank = classes - 1;
    let mut total = f64::NEG_INFINITY;
    let mut path = vec![0usize; t_len];
    for _ in 0..paths {
        if collapse_alignment(&path, blank) == target {
            let lp: f64 = path.iter().enumerate().map(|(t, &k)| log_probs.get(t, k)).sum();
            total = log_add(total, lp);
        }
        for slot in path.iter_mut() {
            *slot += 1;
            if *slot < classes {
                break;
            }
            *slot = 0;
        }
    }
    Ok(-total)
}

/// Per-frame label posteriors `γ_t(k)`, aggregated over lattice states.
pub fn ctc_posteriors(lattice: &CtcLattice) -> Matrix {
    let t_len = lattice.frames();
    let mut post = Matrix::zeros(t_len, lattice.classes);
    let mut acc = vec![f64::NEG_INFINITY; lattice.classes];
    for t in 0..t_len {
        acc.iter_mut().for_each(|v| *v = f64::NEG_INFINITY);
        for (s, &k) in lattice.labels.iter().enumerate() {
            acc[k] = log_add(acc[k], lattice.alpha.get(s, t) + lattice.beta.get(s, t));
        }
        for (k, &a) in acc.iter().enumerate() {
            post.set(t, k, (a - lattice.log_likelihood).exp());
        }
    }
    post
}

/// Gradient of the loss wrt pre-softmax logits: `softmax − γ`.
pub fn ctc_gradient(lattice: &CtcLattice, log_probs: &Matrix) -> Result<Matrix, CtcError> {
    if (lattice.frames(), lattice.classes) != log_probs.shape() {
        return Err(CtcError::LatticeMismatch {
            lattice: (lattice.frames(), lattice.classes),
            log_probs: log_probs.shape(),
        });
    }
    let mut grad = ctc_posteriors(lattice);
    for (g, &lp) in grad.data_mut().iter_mut().zip(log_probs.data()) {
        *g = lp.exp() - *g;
    }
    Ok(grad)
}

/// Best path: per-frame argmax, then collapse. The score sums the chosen
/// per-frame log-probabilities.
pub fn ctc_greedy_decode(log_probs: &Matrix) -> Hypothesis {
    let blank = log_probs.cols() - 1;
    let mut path = Vec::with_capacity(log_probs.rows());
    let mut score = 0.0;
    for t in 0..log_probs.rows() {
        let k = crate::numerics::argmax(log_probs.row(t));
        score += log_probs.get(t, k);
        path.push(k);
    }
    Hypothesis::new(collapse_alignment(&path, blank), score)
}

/// Row-wise log-softmax.
pub fn log_softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for t in 0..logits.rows() {
        let row = log_softmax(logits.row(t));
        out.row_mut(t).copy_from_slice(&row);
    }
    out
}

/// DBLSTM encoder with a CTC output layer of `labels + 1` classes.
#[derive(Clone, Debug, PartialEq)]
pub struct CtcModel {
    pub encoder: Encoder,
    pub projection: OutputProjection,
}

impl CtcModel {
    pub fn register(store: &mut ParamStore, cfg: &EncoderConfig, num_labels: usize) -> Result<Self, CtcError> {
        let encoder = Encoder::register(store, "ctc.enc", cfg)?;
        let projection = OutputProjection::register(store, "ctc.out", cfg.units_per_direction, num_labels + 1)?;
        Ok(CtcModel { encoder, projection })
    }

    pub fn blank(&self) -> usize {
        self.projection.output_dim - 1
    }

    /// Per-frame log distributions in evaluation mode.
    pub fn log_probs(&self, store: &ParamStore, features: &Matrix) -> Result<Matrix, CtcError> {
        let (h, _) = encoder_forward(&self.encoder, store, features, None)?;
        Ok(log_softmax_rows(&project_sequence(&self.projection, store, &h)?))
    }

    pub fn loss(&self, store: &ParamStore, features: &Matrix, target: &[usize]) -> Result<f64, CtcError> {
        Ok(ctc_loss(&self.log_probs(store, features)?, target)?.0)
    }

    /// Loss of one utterance with its gradient accumulated into `grads`.
    /// In training mode the features are noised and layer outputs dropped.
    pub fn loss_and_grad(
        &self,
        store: &ParamStore,
        features: &Matrix,
        target: &[usize],
        train: Option<&mut TrainMode<'_>>,
        grads: &mut Gradients,
    ) -> Result<f64, CtcError> {
        let required = required_frames(target);
        let frames = self.encoder.cfg.output_len(features.rows());
        if frames < required {
            return Err(CtcError::Infeasible {
                frames,
                target_len: target.len(),
                required,
            });
        }
        let (h, cache) = match train {
            Some(mode) => {
                let noisy = mode.perturb(features)?;
                encoder_forward(&self.encoder, store, &noisy, Some(&mut *mode.rng))?
            }
            None => encoder_forward(&self.encoder, store, features, None)?,
        };
        let log_probs = log_softmax_rows(&project_sequence(&self.projection, store, &h)?);
        let (loss, lattice) = ctc_loss(&log_probs, target)?;
        let d_logits = ctc_gradient(&lattice, &log_probs)?;
        let d_h = project_sequence_backward(&self.projection, store, &h, &d_logits, grads);
        encoder_backward(&self.encoder, store, cache, &d_h, grads)?;
        Ok(loss)
    }

    pub fn decode(&self, store: &ParamStore, features: &Matrix) -> Result<Hypothesis, CtcError> {
        Ok(ctc_greedy_decode(&self.log_probs(store, features)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::softmax;

    fn lp(rows: &[Vec<f64>]) -> Matrix {
        let m = Matrix::from_rows(rows);
        let mut out = m.clone();
        for v in out.data_mut() {
            *v = v.ln();
        }
        out
    }

    #[test]
    fn collapse_fixtures() {
        let b = 9;
        assert_eq!(collapse_alignment(&[b, 0, 0, b, 1], b), vec![0, 1]);
        assert_eq!(collapse_alignment(&[0, b, 0], b), vec![0, 0]);
        assert!(collapse_alignment(&[b, b, b], b).is_empty());
        assert_eq!(collapse_alignment(&[2, 0, 1], b), vec![2, 0, 1]);
    }

    #[test]
    fn single_frame_loss() {
        let m = lp(&[vec![0.6, 0.4]]);
        let (loss, _) = ctc_loss(&m, &[0]).unwrap();
        assert!((loss - (-(0.6f64).ln())).abs() < 1e-12);
    }

    #[test]
    fn two_frame_enumeration() {
        let m = lp(&[vec![0.5, 0.5], vec![0.5, 0.5]]);
        let (loss, _) = ctc_loss(&m, &[0]).unwrap();
        assert!((loss - (-(0.75f64).ln())).abs() < 1e-12);
        assert!((ctc_loss_bruteforce(&m, &[0]).unwrap() - loss).abs() < 1e-12);
    }

    #[test]
    fn infeasible_repeat() {
        let m = lp(&[vec![0.3, 0.7], vec![0.3, 0.7]]);
        assert!(matches!(ctc_loss(&m, &[0, 0]), Err(CtcError::Infeasible { required: 3, .. })));
        assert_eq!(ctc_loss_bruteforce(&m, &[0, 0]).unwrap(), f64::INFINITY);
        assert_eq!(ctc_loss_bruteforce(&m, &[0, 0, 0]).unwrap(), f64::INFINITY);
    }

    #[test]
    fn rejects_unnormalized_and_bad_labels() {
        let m = Matrix::from_rows(&[vec![0.0, 0.0]]);
        assert!(matches!(ctc_loss(&m, &[0]), Err(CtcError::NotNormalized { frame: 0, .. })));
        let m = lp(&[vec![0.5, 0.5]]);
        assert!(matches!(ctc_loss(&m, &[1]), Err(CtcError::LabelOutOfRange { .. })));
        assert!(matches!(ctc_loss(&m, &[]), Err(CtcError::EmptyTarget)));
        let big = lp(&vec![vec![0.25; 4]; 10]);
        assert!(matches!(ctc_loss_bruteforce(&big, &[0]), Err(CtcError::TooLarge { .. })));
    }

    #[test]
    fn zero_probability_is_not_infeasible() {
        let m = lp(&[vec![0.0, 1.0], vec![0.0, 1.0]]);
        assert_eq!(ctc_loss(&m, &[0]).unwrap_err(), CtcError::ZeroProbability);
    }

    #[test]
    fn lattice_frame_totals_constant() {
        let rows: Vec<Vec<f64>> = (0..6)
            .map(|t| softmax(&[0.3 * t as f64, -0.2, 0.5, 0.1 * (t * t) as f64]))
            .collect();
        let m = lp(&rows);
        let (loss, lat) = ctc_loss(&m, &[0, 2, 2]).unwrap();
        for t in 0..6 {
            assert!((lat.frame_total(t) + loss).abs() < 1e-8);
        }
        assert!(lat.alpha().data().iter().all(|&v| v <= 0.0));
        assert!(lat.beta().data().iter().all(|&v| v <= 1e-15));
        let post = ctc_posteriors(&lat);
        for t in 0..6 {
            assert!((post.row(t).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn gradient_vanishes_at_optimum() {
        // frames emit a, blank, b with certainty
        let big = 60.0;
        let logits = Matrix::from_rows(&[
            vec![big, 0.0, 0.0],
            vec![0.0, 0.0, big],
            vec![0.0, big, 0.0],
        ]);
        let m = log_softmax_rows(&logits);
        let (loss, lat) = ctc_loss(&m, &[0, 1]).unwrap();
        assert!(loss < 1e-20);
        let g = ctc_gradient(&lat, &m).unwrap();
        assert!(g.sum_squares().sqrt() <= 1e-9);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        for _ in 0..20 {
            let t_len = rng.random_range(3..=8);
            let classes = rng.random_range(2..=4);
            let u = rng.random_range(1..=2.min(t_len / 2));
            let target: Vec<usize> = (0..u).map(|_| rng.random_range(0..classes - 1)).collect();
            if required_frames(&target) > t_len {
                continue;
            }
            let logits = Matrix::from_vec(
                t_len,
                classes,
                (0..t_len * classes).map(|_| rng.random_range(-2.0..2.0)).collect(),
            )
            .unwrap();
            let m = log_softmax_rows(&logits);
            let (_, lat) = ctc_loss(&m, &target).unwrap();
            let g = ctc_gradient(&lat, &m).unwrap();
            let eps = 1e-5;
            for i in 0..logits.data().len() {
                let mut p = logits.clone();
                p.data_mut()[i] += eps;
                let mut q = logits.clone();
                q.data_mut()[i] -= eps;
                let num = (ctc_loss(&log_softmax_rows(&p), &target).unwrap().0
                    - ctc_loss(&log_softmax_rows(&q), &target).unwrap().0)
                    / (2.0 * eps);
                let rel = crate::numerics::relative_error(g.data()[i], num);
                assert!(rel <= 1e-4, "rel {rel}");
            }
        }
    }

    #[test]
    fn permuting_target_changes_loss() {
        let rows: Vec<Vec<f64>> = (0..5)
            .map(|t| softmax(&[t as f64, -(t as f64), 0.5, 0.0]))
            .collect();
        let m = lp(&rows);
        let a = ctc_loss(&m, &[0, 1, 2]).unwrap().0;
        let b = ctc_loss(&m, &[2, 1, 0]).unwrap().0;
        assert!((a - b).abs() > 1e-3);
    }

    #[test]
    fn greedy_decode_fixtures() {
        // blank is index 2
        let onehot = |k: usize| {
            let mut r = vec![0.05; 3];
            r[k] = 0.9;
            r
        };
        let m = lp(&[onehot(2), onehot(0), onehot(0), onehot(2), onehot(1)]);
        let h = ctc_greedy_decode(&m);
        assert_eq!(h.ids, vec![0, 1]);
        assert!((h.log_score - 5.0 * 0.9f64.ln()).abs() < 1e-12);
        let m = lp(&[onehot(2), onehot(2)]);
        assert!(ctc_greedy_decode(&m).ids.is_empty());
        let m = lp(&[onehot(1), onehot(0), onehot(2), onehot(0), onehot(0), onehot(1)]);
        assert_eq!(ctc_greedy_decode(&m).ids, vec![1, 0, 0, 1]);
    }
}
