//! Scoring hypothesis files against a manifest.

use std::collections::{HashMap, HashSet};

use super::{DecodedUtterance, Manifest, PipelineError, TargetSet};
use crate::metrics::{make_report, BucketSpec, EvalPair, ModelResult, Report};

/// One row of the results table.
pub struct EvalRun {
    pub name: String,
    pub targets: TargetSet,
    pub hypotheses: Vec<DecodedUtterance>,
}

fn listed(ids: &[&str]) -> String {
    const SHOWN: usize = 10;
    let mut s = ids.iter().take(SHOWN).copied().collect::<Vec<_>>().join(", ");
    if ids.len() > SHOWN {
        s.push_str(&format!(" and {} more", ids.len() - SHOWN));
    }
    s
}

/// Pairs a run's hypotheses with tokenized references.
pub fn eval_pairs(run: &EvalRun, manifest: &Manifest) -> Result<Vec<EvalPair>, PipelineError> {
    let known: HashSet<&str> = manifest.entries.iter().map(|e| e.utterance_id.as_str()).collect();
    let unknown: Vec<&str> = run
        .hypotheses
        .iter()
        .map(|h| h.utterance_id.as_str())
        .filter(|id| !known.contains(id))
        .collect();
    if !unknown.is_empty() {
        return Err(PipelineError::Data(format!(
            "{}: {} hypotheses not in the manifest: {}",
            run.name,
            unknown.len(),
            listed(&unknown)
        )));
    }
    let by_id: HashMap<&str, &DecodedUtterance> =
        run.hypotheses.iter().map(|h| (h.utterance_id.as_str(), h)).collect();
    if by_id.len() != run.hypotheses.len() {
        return Err(PipelineError::Data(format!("{}: duplicate hypothesis ids", run.name)));
    }
    let missing: Vec<&str> = manifest
        .entries
        .iter()
        .map(|e| e.utterance_id.as_str())
        .filter(|id| !by_id.contains_key(id))
        .collect();
    if !missing.is_empty() {
        return Err(PipelineError::Data(format!(
            "{}: {} utterances have no hypothesis: {}",
            run.name,
            missing.len(),
            listed(&missing)
        )));
    }
    manifest
        .entries
        .iter()
        .map(|e| {
            let hyp = by_id[e.utterance_id.as_str()];
            let hypothesis = run
                .targets
                .alphabet
                .ids_of(&hyp.tokens)
                .map_err(|err| PipelineError::Data(format!("{}: {}: {err}", run.name, e.utterance_id)))?;
            Ok(EvalPair {
                utterance_id: e.utterance_id.clone(),
                reference: run.targets.tokenize(e)?,
                hypothesis,
                word_count: e.word_count,
                scheme: run.targets.scheme(),
            })
        })
        .collect()
}

/// Scores every run and renders the bucketed table.
pub fn cmd_evaluate(runs: &[EvalRun], manifest: &Manifest, buckets: &BucketSpec) -> Result<Report, PipelineError> {
    if runs.is_empty() {
        return Err(PipelineError::Usage("nothing to evaluate".into()));
    }
    let results = runs
        .iter()
        .map(|run| Ok(ModelResult::score(&run.name, &eval_pairs(run, manifest)?, buckets)?))
        .collect::<Result<Vec<_>, PipelineError>>()?;
    Ok(make_report(&results, buckets))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::manifest::ManifestEntry;
    use crate::targets::{Alphabet, Scheme};

    fn entry(id: &str, t: &str) -> ManifestEntry {
        ManifestEntry {
            utterance_id: id.into(),
            audio_path: None,
            feature_path: None,
            transcript: t.into(),
            word_count: t.split_whitespace().count(),
        }
    }

    fn hyp(id: &str, tokens: &[&str]) -> DecodedUtterance {
        DecodedUtterance {
            utterance_id: id.into(),
            tokens: tokens.iter().map(|s| s.to_string()).collect(),
            text: String::new(),
            log_score: 0.0,
            truncated: false,
        }
    }

    fn run(hyps: Vec<DecodedUtterance>) -> EvalRun {
        EvalRun {
            name: "m".into(),
            targets: TargetSet {
                alphabet: Alphabet::new(&["a", "b", "c"], Scheme::Unified).unwrap(),
                lexicon: None,
            },
            hypotheses: hyps,
        }
    }

    #[test]
    fn perfect_hypotheses_score_zero() {
        let m = Manifest {
            entries: vec![entry("1", "ab c"), entry("2", "a")],
        };
        let r = run(vec![hyp("1", &["a", "b", "_", "c"]), hyp("2", &["a"])]);
        let spec = BucketSpec::new(vec![(1, 1, "One"), (2, 9, "Many")]).unwrap();
        let rep = cmd_evaluate(&[r], &m, &spec).unwrap();
        assert_eq!(rep.csv, "model,bucket,metric,value\nm,One,CER,0.0000\nm,Many,CER,0.0000\nm,Average,CER,0.0000\n");
    }

    #[test]
    fn hand_scored_fixture() {
        let m = Manifest {
            entries: vec![
                entry("1", "abc"),
                entry("2", "ab ab"),
                entry("3", "c"),
                entry("4", "a b c"),
                entry("5", "cc"),
            ],
        };
        let r = run(vec![
            hyp("1", &["a", "b"]),                     // 1 / 3
            hyp("2", &["a", "b", "a", "b"]),           // 1 / 5
            hyp("3", &["c"]),                          // 0 / 1
            hyp("4", &["a", "_", "b", "_", "c", "c"]), // 1 / 5
            hyp("5", &[]),                             // 2 / 2
        ]);
        let spec = BucketSpec::new(vec![(1, 1, "S"), (2, 3, "L")]).unwrap();
        let pairs = eval_pairs(&r, &m).unwrap();
        let res = ModelResult::score("m", &pairs, &spec).unwrap();
        assert!((res.buckets["S"].rate().unwrap() - 50.0).abs() < 1e-12); // 3 / 6
        assert!((res.buckets["L"].rate().unwrap() - 20.0).abs() < 1e-12); // 2 / 10
        assert!((res.average.rate().unwrap() - 100.0 * 5.0 / 16.0).abs() < 1e-12);
    }

    #[test]
    fn missing_and_unknown_ids_listed() {
        let m = Manifest {
            entries: vec![entry("1", "a"), entry("2", "b")],
        };
        let err = cmd_evaluate(&[run(vec![hyp("1", &["a"])])], &m, &BucketSpec::default()).unwrap_err();
        assert!(err.to_string().contains("no hypothesis: 2"), "{err}");
        let err = cmd_evaluate(
            &[run(vec![hyp("1", &["a"]), hyp("2", &["b"]), hyp("9", &["b"])])],
            &m,
            &BucketSpec::default(),
        )
        .unwrap_err();
        assert!(err.to_string().contains("not in the manifest: 9"), "{err}");
    }
}
