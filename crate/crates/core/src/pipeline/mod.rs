//! Experiment orchestration: config, manifests, synthetic data and the
//! train / decode / evaluate commands.

pub mod config;
pub mod decode;
pub mod evaluate;
pub mod gradcheck;
pub mod manifest;
pub mod synth;
pub mod train;

use std::io;
use std::path::Path;

use thiserror::Error;

use crate::checkpoint::CheckpointError;
use crate::features::{FeatureConfig, FeatureError};
use crate::metrics::MetricsError;
use crate::model::ModelError;
use crate::numerics::{Matrix, NumericsError};
use crate::targets::{load_alphabet, load_lexicon, tokenize, Alphabet, Lexicon, Scheme, TargetError};

pub use config::{parse_config, ExperimentConfig};
pub use decode::{cmd_decode, read_hypotheses, DecodedUtterance};
pub use evaluate::{cmd_evaluate, EvalRun};
pub use gradcheck::cmd_gradcheck;
pub use manifest::{load_manifest, Manifest, ManifestEntry};
pub use synth::{generate_synthetic_corpus, SynthCorpus, SynthSpec};
pub use train::{cmd_train, PlateauSchedule, TrainSummary};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] config::ConfigError),
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
    #[error(transparent)]
    Manifest(#[from] manifest::ManifestError),
    #[error(transparent)]
    Targets(#[from] TargetError),
    #[error(transparent)]
    Features(#[from] FeatureError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{0}")]
    Data(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("non-finite {what} at epoch {epoch}, batch {batch}")]
    NonFinite { what: String, epoch: usize, batch: usize },
    #[error("gradient check failed: max relative error {max_rel_error:e} exceeds {tolerance:e}")]
    GradCheck { max_rel_error: f64, tolerance: f64 },
}

impl PipelineError {
    pub fn io(path: &Path, source: io::Error) -> Self {
        PipelineError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// 1 for usage and configuration, 2 for data validation, 3 for
    /// numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Usage(_) | PipelineError::Config(_) => 1,
            PipelineError::Checkpoint(CheckpointError::Numerics(_)) => 3,
            PipelineError::Io { .. }
            | PipelineError::Manifest(_)
            | PipelineError::Targets(_)
            | PipelineError::Features(_)
            | PipelineError::Metrics(_)
            | PipelineError::Checkpoint(_)
            | PipelineError::Data(_) => 2,
            PipelineError::Model(_)
            | PipelineError::Numerics(_)
            | PipelineError::NonFinite { .. }
            | PipelineError::GradCheck { .. } => 3,
        }
    }
}

/// Target alphabet plus, for phone targets, the pronunciation lexicon.
#[derive(Clone, Debug)]
pub struct TargetSet {
    pub alphabet: Alphabet,
    pub lexicon: Option<Lexicon>,
}

impl TargetSet {
    pub fn load(scheme: Scheme, alphabet: &Path, lexicon: Option<&Path>) -> Result<Self, PipelineError> {
        let alphabet = load_alphabet(alphabet, scheme, false)?;
        let lexicon = match (scheme, lexicon) {
            (Scheme::Reduced, Some(p)) => Some(load_lexicon(p, &alphabet)?),
            (Scheme::Reduced, None) => return Err(PipelineError::Usage("phone targets need a lexicon".into())),
            (Scheme::Unified, _) => None,
        };
        Ok(TargetSet { alphabet, lexicon })
    }

    pub fn from_config(cfg: &ExperimentConfig) -> Result<Self, PipelineError> {
        TargetSet::load(cfg.scheme, &cfg.alphabet, cfg.lexicon.as_deref())
    }

    pub fn scheme(&self) -> Scheme {
        self.alphabet.kind()
    }

    pub fn tokenize(&self, entry: &ManifestEntry) -> Result<Vec<usize>, PipelineError> {
        let words = entry.words();
        tokenize(&words, &self.alphabet, self.lexicon.as_ref())
            .map(|seq| seq.ids().to_vec())
            .map_err(|e| PipelineError::Data(format!("{}: {e}", entry.utterance_id)))
    }
}

/// A manifest entry with its features and target ids in memory.
#[derive(Clone, Debug)]
pub struct Utterance {
    pub id: String,
    pub features: Matrix,
    pub target: Vec<usize>,
    pub word_count: usize,
}

pub fn load_utterances(
    manifest: &Manifest,
    targets: &TargetSet,
    feature_dim: usize,
) -> Result<Vec<Utterance>, PipelineError> {
    let fcfg = FeatureConfig::default();
    manifest
        .entries
        .iter()
        .map(|e| {
            let feats = e.load_features(&fcfg)?;
            if feats.dim() != feature_dim {
                return Err(PipelineError::Data(format!(
                    "{}: features have {} dims, config expects {feature_dim}",
                    e.utterance_id,
                    feats.dim()
                )));
            }
            Ok(Utterance {
                id: e.utterance_id.clone(),
                features: feats.frames,
                target: targets.tokenize(e)?,
                word_count: e.word_count,
            })
        })
        .collect()
}
