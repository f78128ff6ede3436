//! Finite-difference check of a small random model of either kind.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::PipelineError;
use crate::attention::LasConfig;
use crate::encoder::{EncoderConfig, EncoderKind};
use crate::model::{Model, ModelConfig, ModelKind};
use crate::numerics::{grad_check, GradCheckReport, Matrix, ParamStore};

/// Builds a model with every dimension at most 8, random frames (T ≤ 16)
/// and a random target (length ≤ 4), then compares analytic gradients with
/// central differences.
pub fn cmd_gradcheck(kind: ModelKind, seed: u64, epsilon: f64, sample: usize) -> Result<GradCheckReport, PipelineError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels = 4;
    let cfg = match kind {
        ModelKind::Ctc => ModelConfig::Ctc {
            encoder: EncoderConfig {
                kind: EncoderKind::Flat,
                input_dim: 5,
                layers: 2,
                units_per_direction: 4,
                pyramid_step: 2,
                dropout_rate: 0.5,
            },
            num_labels: labels,
        },
        ModelKind::Attention => ModelConfig::Attention(LasConfig {
            listener_layers: 2,
            listener_units: 3,
            speller_layers: 2,
            speller_units: 4,
            embed_dim: 3,
            attention_dim: 4,
            ..LasConfig::new(5, labels)
        }),
    };
    let mut store = ParamStore::new(seed);
    let model = Model::register(&mut store, &cfg)?;
    // wider than the default init so every path carries a resolvable gradient
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.tensor_mut(id).data_mut() {
            *v = rng.random_range(-0.8..0.8);
        }
    }
    let frames = rng.random_range(12..=16);
    let features = Matrix::from_vec(frames, 5, (0..frames * 5).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let target: Vec<usize> = (0..rng.random_range(2..=4)).map(|_| rng.random_range(0..labels)).collect();
    store.with_grads(|s, g| model.loss_and_grad(s, &features, &target, None, g))?;
    Ok(grad_check(
        &mut |s| model.loss(s, &features, &target).unwrap_or(f64::NAN),
        &mut store,
        epsilon,
        sample,
    )?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn both_models_pass() {
        for kind in [ModelKind::Ctc, ModelKind::Attention] {
            let r = cmd_gradcheck(kind, 3, 1e-5, 300).unwrap();
            assert_eq!(r.checked, 300);
            assert!(r.max_rel_error <= 1e-4, "{kind}: {r:?}");
        }
    }
}
