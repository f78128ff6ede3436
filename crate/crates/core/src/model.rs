//! Either recognizer behind one interface, as used by training and decoding.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{beam_search, greedy_decode, las_loss, las_loss_and_grad, AttentionError, LasConfig, LasModel};
use crate::ctc::{CtcError, CtcModel};
use crate::encoder::EncoderConfig;
use crate::hypothesis::Hypothesis;
use crate::numerics::{Gradients, Matrix, ParamStore, TrainMode};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Ctc(#[from] CtcError),
    #[error(transparent)]
    Attention(#[from] AttentionError),
}

impl ModelError {
    /// True when the utterance is too short for its CTC target.
    pub fn is_infeasible(&self) -> bool {
        matches!(self, ModelError::Ctc(CtcError::Infeasible { .. }))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Ctc,
    Attention,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Ctc => "ctc",
            ModelKind::Attention => "attention",
        })
    }
}

impl FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ctc" => Ok(ModelKind::Ctc),
            "attention" | "las" => Ok(ModelKind::Attention),
            other => Err(format!("unknown model kind `{other}` (expected ctc or attention)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelConfig {
    Ctc { encoder: EncoderConfig, num_labels: usize },
    Attention(LasConfig),
}

impl ModelConfig {
    pub fn kind(&self) -> ModelKind {
        match self {
            ModelConfig::Ctc { .. } => ModelKind::Ctc,
            ModelConfig::Attention(_) => ModelKind::Attention,
        }
    }

    pub fn num_labels(&self) -> usize {
        match self {
            ModelConfig::Ctc { num_labels, .. } => *num_labels,
            ModelConfig::Attention(c) => c.num_labels,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            ModelConfig::Ctc { encoder, .. } => encoder.input_dim,
            ModelConfig::Attention(c) => c.input_dim,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Model {
    Ctc(CtcModel),
    Attention(LasModel),
}

impl Model {
    /// Registers missing parameters, reusing any already in `store`.
    pub fn register(store: &mut ParamStore, cfg: &ModelConfig) -> Result<Self, ModelError> {
        Ok(match cfg {
            ModelConfig::Ctc { encoder, num_labels } => {
                encoder.validate().map_err(CtcError::from)?;
                Model::Ctc(CtcModel::register(store, encoder, *num_labels)?)
            }
            ModelConfig::Attention(c) => Model::Attention(LasModel::register(store, c)?),
        })
    }

    pub fn loss(&self, store: &ParamStore, features: &Matrix, target: &[usize]) -> Result<f64, ModelError> {
        Ok(match self {
            Model::Ctc(m) => m.loss(store, features, target)?,
            Model::Attention(m) => las_loss(m, store, features, target, None)?,
        })
    }

    pub fn loss_and_grad(
        &self,
        store: &ParamStore,
        features: &Matrix,
        target: &[usize],
        train: Option<&mut TrainMode<'_>>,
        grads: &mut Gradients,
    ) -> Result<f64, ModelError> {
        Ok(match self {
            Model::Ctc(m) => m.loss_and_grad(store, features, target, train, grads)?,
            Model::Attention(m) => las_loss_and_grad(m, store, features, target, train, grads)?,
        })
    }

    /// Best-path decoding for CTC; beam search for attention, where a
    /// width of 1 is plain greedy decoding.
    pub fn decode(&self, store: &ParamStore, features: &Matrix, beam_width: usize) -> Result<Hypothesis, ModelError> {
        Ok(match self {
            Model::Ctc(m) => m.decode(store, features)?,
            Model::Attention(m) if beam_width <= 1 => greedy_decode(m, store, features, None)?,
            Model::Attention(m) => beam_search(m, store, features, beam_width, None)?
                .into_iter()
                .next()
                .expect("beam search returns at least one hypothesis"),
        })
    }
}
