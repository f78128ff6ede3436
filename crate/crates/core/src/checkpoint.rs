//! Binary checkpoints.
//!
//! Layout, little-endian: magic `CSE2`, `u32` version, `u32` length of a
//! JSON config block, the block, `u32` tensor count, then per tensor
//! `u32` name length, UTF-8 name, `u32` rows, `u32` cols and `rows × cols`
//! `f64` values.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Model, ModelConfig, ModelError};
use crate::numerics::{Matrix, NumericsError, ParamStore};
use crate::targets::{Alphabet, Scheme};

pub const MAGIC: &[u8; 4] = b"CSE2";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint I/O: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint lacks parameters the model needs ({missing} registered on load)")]
    MissingTensors { missing: usize },
    #[error("checkpoint was trained on {stored} targets, requested {requested}")]
    SchemeMismatch { stored: Scheme, requested: Scheme },
    #[error("alphabet fingerprint mismatch: checkpoint {stored}, runtime {runtime}")]
    AlphabetMismatch { stored: String, runtime: String },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub scheme: Scheme,
    pub alphabet_fingerprint: String,
    pub seed: u64,
    pub epoch: usize,
    pub dev_loss: Option<f64>,
}

impl CheckpointMeta {
    /// Rejects decoding with a different scheme or target alphabet.
    pub fn check_compatible(&self, scheme: Scheme, alphabet: &Alphabet) -> Result<(), CheckpointError> {
        if self.scheme != scheme {
            return Err(CheckpointError::SchemeMismatch {
                stored: self.scheme,
                requested: scheme,
            });
        }
        let runtime = alphabet.fingerprint();
        if runtime != self.alphabet_fingerprint {
            return Err(CheckpointError::AlphabetMismatch {
                stored: self.alphabet_fingerprint.clone(),
                runtime,
            });
        }
        Ok(())
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<(), CheckpointError> {
    let v = u32::try_from(v).map_err(|_| CheckpointError::Corrupt(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode_checkpoint(meta: &CheckpointMeta, store: &ParamStore) -> Result<Vec<u8>, CheckpointError> {
    let config = serde_json::to_vec(meta).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    let mut out = Vec::with_capacity(16 + config.len() + store.num_scalars() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_u32(&mut out, config.len())?;
    out.extend_from_slice(&config);
    put_u32(&mut out, store.len())?;
    for (name, t) in store.iter() {
        put_u32(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.rows())?;
        put_u32(&mut out, t.cols())?;
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Writes through a temporary file so a crash never leaves a torn
/// checkpoint behind.
pub fn save_checkpoint(path: &Path, meta: &CheckpointMeta, store: &ParamStore) -> Result<(), CheckpointError> {
    let bytes = encode_checkpoint(meta, store)?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.buf.len() < n {
            return Err(CheckpointError::Corrupt("unexpected end of file".into()));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn u32(&mut self) -> Result<usize, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(CheckpointMeta, ParamStore), CheckpointError> {
    let mut r = Reader { buf: bytes };
    if r.take(4).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()? as u32;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let len = r.u32()?;
    let meta: CheckpointMeta =
        serde_json::from_slice(r.take(len)?).map_err(|e| CheckpointError::Corrupt(format!("config block: {e}")))?;
    let mut store = ParamStore::new(meta.seed);
    let count = r.u32()?;
    for _ in 0..count {
        let len = r.u32()?;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| CheckpointError::Corrupt("tensor name is not UTF-8".into()))?
            .to_string();
        let rows = r.u32()?;
        let cols = r.u32()?;
        let n = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| CheckpointError::Corrupt(format!("tensor `{name}` is too large")))?;
        let data = r
            .take(n)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        store.insert(&name, Matrix::from_vec(rows, cols, data)?)?;
    }
    if !r.buf.is_empty() {
        return Err(CheckpointError::Corrupt(format!("{} trailing bytes", r.buf.len())));
    }
    Ok((meta, store))
}

/// Loads a checkpoint and rebuilds its model over the stored tensors.
pub fn load_checkpoint(path: &Path) -> Result<(CheckpointMeta, ParamStore, Model), CheckpointError> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let (meta, mut store) = decode_checkpoint(&bytes)?;
    let before = store.len();
    let model = Model::register(&mut store, &meta.model)?;
    if store.len() != before {
        return Err(CheckpointError::MissingTensors {
            missing: store.len() - before,
        });
    }
    Ok((meta, store, model))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::LasConfig;
    use crate::encoder::{EncoderConfig, EncoderKind};

    fn meta(model: ModelConfig) -> CheckpointMeta {
        CheckpointMeta {
            model,
            scheme: Scheme::Reduced,
            alphabet_fingerprint: "abc".into(),
            seed: 7,
            epoch: 3,
            dev_loss: Some(1.25),
        }
    }

    fn ctc_config() -> ModelConfig {
        ModelConfig::Ctc {
            encoder: EncoderConfig {
                kind: EncoderKind::Flat,
                input_dim: 4,
                layers: 2,
                units_per_direction: 3,
                pyramid_step: 2,
                dropout_rate: 0.5,
            },
            num_labels: 5,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for cfg in [ctc_config(), ModelConfig::Attention(LasConfig {
            listener_layers: 1,
            listener_units: 3,
            speller_layers: 1,
            speller_units: 4,
            embed_dim: 2,
            attention_dim: 3,
            ..LasConfig::new(4, 5)
        })] {
            let mut store = ParamStore::new(7);
            Model::register(&mut store, &cfg).unwrap();
            let m = meta(cfg);
            let bytes = encode_checkpoint(&m, &store).unwrap();
            assert_eq!(&bytes[..4], b"CSE2");
            let (m2, s2) = decode_checkpoint(&bytes).unwrap();
            assert_eq!(m, m2);
            assert_eq!(encode_checkpoint(&m2, &s2).unwrap(), bytes);
            for ((n1, t1), (n2, t2)) in store.iter().zip(s2.iter()) {
                assert_eq!(n1, n2);
                assert_eq!(t1, t2);
            }
        }
    }

    #[test]
    fn load_rebuilds_model() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut store = ParamStore::new(1);
        let model = Model::register(&mut store, &ctc_config()).unwrap();
        save_checkpoint(&path, &meta(ctc_config()), &store).unwrap();
        let (_, s2, m2) = load_checkpoint(&path).unwrap();
        assert_eq!(model, m2);
        let x = Matrix::from_vec(3, 4, (0..12).map(|i| i as f64 * 0.1).collect()).unwrap();
        assert_eq!(model.loss(&store, &x, &[1, 2]).unwrap(), m2.loss(&s2, &x, &[1, 2]).unwrap());
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let mut store = ParamStore::new(1);
        Model::register(&mut store, &ctc_config()).unwrap();
        let bytes = encode_checkpoint(&meta(ctc_config()), &store).unwrap();
        assert!(matches!(decode_checkpoint(b"NOPE"), Err(CheckpointError::BadMagic)));
        assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 3]), Err(CheckpointError::Corrupt(_))));
        let mut v2 = bytes.clone();
        v2[4] = 9;
        assert!(matches!(decode_checkpoint(&v2), Err(CheckpointError::Version(9))));
        let mut extra = bytes;
        extra.push(0);
        assert!(matches!(decode_checkpoint(&extra), Err(CheckpointError::Corrupt(_))));
    }

    #[test]
    fn missing_tensor_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut store = ParamStore::new(1);
        store.add("ctc.enc.l0.fwd.w_x", 12, 4, crate::numerics::Init::Zeros).unwrap();
        save_checkpoint(&path, &meta(ctc_config()), &store).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(CheckpointError::MissingTensors { .. })));
    }

    #[test]
    fn compatibility_checks() {
        let alphabet = Alphabet::new(&["a", "b"], Scheme::Reduced).unwrap();
        let mut m = meta(ctc_config());
        m.alphabet_fingerprint = alphabet.fingerprint();
        assert!(m.check_compatible(Scheme::Reduced, &alphabet).is_ok());
        assert!(matches!(
            m.check_compatible(Scheme::Unified, &alphabet),
            Err(CheckpointError::SchemeMismatch { .. })
        ));
        let other = Alphabet::new(&["a", "c"], Scheme::Reduced).unwrap();
        assert!(matches!(
            m.check_compatible(Scheme::Reduced, &other),
            Err(CheckpointError::AlphabetMismatch { .. })
        ));
    }
}
