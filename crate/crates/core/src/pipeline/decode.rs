//! Decoding a manifest with a trained checkpoint.

use std::fs;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{ExperimentConfig, Manifest, PipelineError, TargetSet};
use crate::checkpoint::load_checkpoint;
use crate::features::FeatureConfig;
use crate::targets::{detokenize, token_strings};

/// One line of a hypothesis file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodedUtterance {
    pub utterance_id: String,
    pub tokens: Vec<String>,
    pub text: String,
    pub log_score: f64,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub truncated: bool,
}

/// Decodes every utterance of `manifest` and writes JSON lines to `out`.
/// Scheme and alphabet are checked against the checkpoint first.
pub fn cmd_decode(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    manifest: &Manifest,
    out: &Path,
) -> Result<Vec<DecodedUtterance>, PipelineError> {
    let targets = TargetSet::from_config(cfg)?;
    let (meta, store, model) = load_checkpoint(checkpoint)?;
    meta.check_compatible(cfg.scheme, &targets.alphabet)?;
    if meta.model.kind() != cfg.kind {
        return Err(PipelineError::Usage(format!(
            "checkpoint holds a {} model, config asks for {}",
            meta.model.kind(),
            cfg.kind
        )));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.training.threads)
        .build()
        .map_err(|e| PipelineError::Usage(format!("thread pool: {e}")))?;
    let fcfg = FeatureConfig::default();
    let beam = cfg.decoding.beam_width;
    let decoded: Vec<Result<DecodedUtterance, PipelineError>> = pool.install(|| {
        manifest
            .entries
            .par_iter()
            .map(|e| {
                let feats = e.load_features(&fcfg)?;
                let hyp = model.decode(&store, &feats.frames, beam)?;
                Ok(DecodedUtterance {
                    utterance_id: e.utterance_id.clone(),
                    tokens: token_strings(&hyp.ids, &targets.alphabet),
                    text: detokenize(&hyp.ids, &targets.alphabet).join(" "),
                    log_score: hyp.log_score,
                    truncated: hyp.truncated,
                })
            })
            .collect()
    });
    let decoded: Vec<DecodedUtterance> = decoded.into_iter().collect::<Result<_, _>>()?;
    let mut buf = Vec::new();
    for d in &decoded {
        serde_json::to_writer(&mut buf, d).map_err(|e| PipelineError::Data(e.to_string()))?;
        buf.push(b'\n');
    }
    fs::File::create(out)
        .and_then(|mut f| f.write_all(&buf))
        .map_err(|e| PipelineError::io(out, e))?;
    Ok(decoded)
}

pub fn read_hypotheses(path: &Path) -> Result<Vec<DecodedUtterance>, PipelineError> {
    let text = fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            serde_json::from_str(l)
                .map_err(|e| PipelineError::Data(format!("{}:{}: {e}", path.display(), n + 1)))
        })
        .collect()
}
