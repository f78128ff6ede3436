//! INI-style experiment configuration.
//!
//! ```text
//! [model]
//! kind = ctc            # or attention
//! scheme = reduced      # or unified
//! alphabet = reduced.txt
//! lexicon = lexicon.tsv
//!
//! [training]
//! epochs = 20
//! ```
//!
//! Relative paths resolve against the config file's directory.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::attention::LasConfig;
use crate::encoder::{EncoderConfig, EncoderKind};
use crate::model::{ModelConfig, ModelKind};
use crate::targets::Scheme;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("line {line}: unknown section [{section}]")]
    UnknownSection { line: usize, section: String },
    #[error("line {line}: unknown key `{key}` in [{section}]")]
    UnknownKey { line: usize, section: String, key: String },
    #[error("line {line}: key `{key}`: expected {expected}, got `{value}`")]
    BadValue {
        line: usize,
        key: String,
        expected: &'static str,
        value: String,
    },
    #[error("line {line}: key `{key}` given twice")]
    DuplicateKey { line: usize, key: String },
    #[error("missing required key `{0}`")]
    Missing(&'static str),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub lr_decay: f64,
    /// Epochs without dev improvement before the learning rate decays.
    pub patience: usize,
    pub noise_sigma: f64,
    pub seed: u64,
    /// Global gradient-norm clip; `None` leaves gradients untouched.
    pub grad_clip: Option<f64>,
    /// Worker threads for per-utterance gradients; 0 uses all cores.
    pub threads: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodingConfig {
    pub beam_width: usize,
    pub max_decode_len: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub train: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub test: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub kind: ModelKind,
    pub scheme: Scheme,
    pub alphabet: PathBuf,
    pub lexicon: Option<PathBuf>,
    pub feature_dim: usize,
    pub encoder_kind: EncoderKind,
    pub encoder_layers: usize,
    pub encoder_units: usize,
    pub pyramid_step: usize,
    pub dropout: f64,
    pub speller_layers: usize,
    pub speller_units: usize,
    pub embed_dim: usize,
    pub attention_dim: usize,
    pub training: TrainingConfig,
    pub decoding: DecodingConfig,
    pub data: DataConfig,
}

impl ExperimentConfig {
    pub fn model_config(&self, num_labels: usize) -> ModelConfig {
        match self.kind {
            ModelKind::Ctc => ModelConfig::Ctc {
                encoder: EncoderConfig {
                    kind: self.encoder_kind,
                    input_dim: self.feature_dim,
                    layers: self.encoder_layers,
                    units_per_direction: self.encoder_units,
                    pyramid_step: self.pyramid_step,
                    dropout_rate: self.dropout,
                },
                num_labels,
            },
            ModelKind::Attention => ModelConfig::Attention(LasConfig {
                input_dim: self.feature_dim,
                num_labels,
                listener_layers: self.encoder_layers,
                listener_units: self.encoder_units,
                pyramid_step: self.pyramid_step,
                speller_layers: self.speller_layers,
                speller_units: self.speller_units,
                embed_dim: self.embed_dim,
                attention_dim: self.attention_dim,
                beam_width: self.decoding.beam_width,
                max_decode_len: self.decoding.max_decode_len,
                dropout_rate: self.dropout,
            }),
        }
    }
}

const KEYS: &[(&str, &[&str])] = &[
    ("model", &["kind", "scheme", "alphabet", "lexicon", "feature_dim"]),
    ("encoder", &["kind", "layers", "units", "pyramid_step", "dropout"]),
    ("speller", &["layers", "units", "embed_dim", "attention_dim"]),
    (
        "training",
        &[
            "epochs",
            "batch_size",
            "base_lr",
            "lr_decay",
            "patience",
            "noise_sigma",
            "seed",
            "grad_clip",
            "threads",
        ],
    ),
    ("decoding", &["beam_width", "max_decode_len"]),
    ("data", &["train", "dev", "test"]),
];

struct Entries {
    items: Vec<(String, String, String, usize)>,
}

impl Entries {
    fn find(&self, section: &str, key: &str) -> Option<(&str, usize)> {
        self.items
            .iter()
            .find(|(s, k, _, _)| s == section && k == key)
            .map(|(_, _, v, l)| (v.as_str(), *l))
    }

    fn get<T: FromStr>(&self, section: &str, key: &'static str, expected: &'static str) -> Result<Option<T>, ConfigError> {
        match self.find(section, key) {
            None => Ok(None),
            Some((v, line)) => v.parse().map(Some).map_err(|_| ConfigError::BadValue {
                line,
                key: key.to_string(),
                expected,
                value: v.to_string(),
            }),
        }
    }

    fn get_or<T: FromStr>(&self, section: &str, key: &'static str, expected: &'static str, default: T) -> Result<T, ConfigError> {
        Ok(self.get(section, key, expected)?.unwrap_or(default))
    }
}

fn tokenize_ini(text: &str) -> Result<Entries, ConfigError> {
    let mut section: Option<String> = None;
    let mut items: Vec<(String, String, String, usize)> = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = n + 1;
        let body = raw.split(['#', ';']).next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        if let Some(name) = body.strip_prefix('[') {
            let name = name.strip_suffix(']').ok_or_else(|| ConfigError::Syntax {
                line,
                message: format!("unterminated section header `{body}`"),
            })?;
            let name = name.trim().to_string();
            if !KEYS.iter().any(|(s, _)| *s == name) {
                return Err(ConfigError::UnknownSection { line, section: name });
            }
            section = Some(name);
            continue;
        }
        let (key, value) = body.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line,
            message: format!("expected `key = value`, got `{body}`"),
        })?;
        let key = key.trim().to_string();
        let sec = section.clone().ok_or_else(|| ConfigError::Syntax {
            line,
            message: format!("key `{key}` appears before any section"),
        })?;
        let allowed = KEYS.iter().find(|(s, _)| *s == sec).map(|(_, k)| *k).unwrap_or(&[]);
        if !allowed.contains(&key.as_str()) {
            return Err(ConfigError::UnknownKey { line, section: sec, key });
        }
        if items.iter().any(|(s, k, _, _)| *s == sec && *k == key) {
            return Err(ConfigError::DuplicateKey { line, key });
        }
        items.push((sec, key, value.trim().to_string(), line));
    }
    Ok(Entries { items })
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Parses config text; `base` anchors relative paths.
pub fn parse_config_str(text: &str, base: &Path) -> Result<ExperimentConfig, ConfigError> {
    let e = tokenize_ini(text)?;
    let kind: ModelKind = e.get("model", "kind", "ctc or attention")?.ok_or(ConfigError::Missing("model.kind"))?;
    let scheme: Scheme = e.get("model", "scheme", "unified or reduced")?.ok_or(ConfigError::Missing("model.scheme"))?;
    let alphabet = e
        .find("model", "alphabet")
        .map(|(v, _)| resolve(base, v))
        .ok_or(ConfigError::Missing("model.alphabet"))?;
    let lexicon = e.find("model", "lexicon").map(|(v, _)| resolve(base, v));
    if scheme == Scheme::Reduced && lexicon.is_none() {
        return Err(ConfigError::Missing("model.lexicon"));
    }
    let attention = kind == ModelKind::Attention;

    let encoder_kind = match e.find("encoder", "kind") {
        None if attention => EncoderKind::Pyramidal,
        None => EncoderKind::Flat,
        Some(("flat", _)) => EncoderKind::Flat,
        Some(("pyramidal", _)) => EncoderKind::Pyramidal,
        Some((v, line)) => {
            return Err(ConfigError::BadValue {
                line,
                key: "kind".into(),
                expected: "flat or pyramidal",
                value: v.into(),
            })
        }
    };
    if attention && encoder_kind != EncoderKind::Pyramidal {
        return Err(ConfigError::Invalid("the attention listener is always pyramidal".into()));
    }

    let training = TrainingConfig {
        epochs: e.get_or("training", "epochs", "integer", if attention { 400 } else { 250 })?,
        batch_size: e.get_or("training", "batch_size", "integer", 32)?,
        base_lr: e.get_or("training", "base_lr", "number", 0.05)?,
        lr_decay: e.get_or("training", "lr_decay", "number", 0.1)?,
        patience: e.get_or("training", "patience", "integer", 3)?,
        noise_sigma: e.get_or("training", "noise_sigma", "number", 0.6)?,
        seed: e.get_or("training", "seed", "integer", 1)?,
        grad_clip: e.get::<f64>("training", "grad_clip", "number")?.filter(|&c| c > 0.0),
        threads: e.get_or("training", "threads", "integer", 0)?,
    };
    let cfg = ExperimentConfig {
        kind,
        scheme,
        alphabet,
        lexicon,
        feature_dim: e.get_or("model", "feature_dim", "integer", 26)?,
        encoder_kind,
        encoder_layers: e.get_or("encoder", "layers", "integer", if attention { 3 } else { 4 })?,
        encoder_units: e.get_or("encoder", "units", "integer", if attention { 512 } else { 256 })?,
        pyramid_step: e.get_or("encoder", "pyramid_step", "integer", 2)?,
        dropout: e.get_or("encoder", "dropout", "number", 0.5)?,
        speller_layers: e.get_or("speller", "layers", "integer", 2)?,
        speller_units: e.get_or("speller", "units", "integer", 512)?,
        embed_dim: e.get_or("speller", "embed_dim", "integer", 64)?,
        attention_dim: e.get_or("speller", "attention_dim", "integer", 128)?,
        training,
        decoding: DecodingConfig {
            beam_width: e.get_or("decoding", "beam_width", "integer", 16)?,
            max_decode_len: e.get("decoding", "max_decode_len", "integer")?,
        },
        data: DataConfig {
            train: e.find("data", "train").map(|(v, _)| resolve(base, v)),
            dev: e.find("data", "dev").map(|(v, _)| resolve(base, v)),
            test: e.find("data", "test").map(|(v, _)| resolve(base, v)),
        },
    };
    validate(&cfg)?;
    Ok(cfg)
}

fn validate(cfg: &ExperimentConfig) -> Result<(), ConfigError> {
    let t = &cfg.training;
    let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
    if t.epochs == 0 {
        return bad("training.epochs must be >= 1");
    }
    if t.batch_size == 0 {
        return bad("training.batch_size must be >= 1");
    }
    if !(t.base_lr > 0.0 && t.base_lr.is_finite()) {
        return bad("training.base_lr must be positive");
    }
    if !(t.lr_decay > 0.0 && t.lr_decay <= 1.0) {
        return bad("training.lr_decay must be in (0, 1]");
    }
    if !(t.noise_sigma >= 0.0 && t.noise_sigma.is_finite()) {
        return bad("training.noise_sigma must be non-negative");
    }
    if !(0.0..1.0).contains(&cfg.dropout) {
        return bad("encoder.dropout must be in [0, 1)");
    }
    if cfg.decoding.beam_width == 0 {
        return bad("decoding.beam_width must be >= 1");
    }
    if cfg.decoding.max_decode_len == Some(0) {
        return bad("decoding.max_decode_len must be >= 1");
    }
    if cfg.encoder_layers == 0 || cfg.encoder_units == 0 || cfg.feature_dim == 0 {
        return bad("encoder layers, units and feature_dim must be >= 1");
    }
    Ok(())
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = fs::read_to_string(path).map_err(|e| ConfigError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_config_str(&text, base)
}
