//! JSON-lines corpus manifests.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{extract_features, read_feature_file, read_wav, FeatureConfig, FeatureError, FeatureMatrix};
use crate::targets::split_words;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub utterance_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audio_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_path: Option<PathBuf>,
    pub transcript: String,
    pub word_count: usize,
}

impl ManifestEntry {
    pub fn words(&self) -> Vec<&str> {
        split_words(&self.transcript)
    }

    /// Reads cached features, or extracts them from audio.
    pub fn load_features(&self, cfg: &FeatureConfig) -> Result<FeatureMatrix, FeatureError> {
        match (&self.feature_path, &self.audio_path) {
            (Some(p), _) => read_feature_file(p, &self.utterance_id),
            (None, Some(p)) => extract_features(&read_wav(p)?, cfg, &self.utterance_id),
            (None, None) => Err(FeatureError::Invalid(format!("{}: no audio or feature path", self.utterance_id))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestIssue {
    pub line: usize,
    pub message: String,
}

impl fmt::Display for ManifestIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{} manifest problem(s):\n{}", .0.len(), .0.iter().map(|i| format!("  {i}")).collect::<Vec<_>>().join("\n"))]
    Invalid(Vec<ManifestIssue>),
}

impl Manifest {
    /// Parses and validates manifest text. Relative paths resolve against
    /// `base`; with `check_files`, referenced files must exist.
    pub fn parse(text: &str, base: &Path, check_files: bool) -> Result<Self, ManifestError> {
        let mut issues = Vec::new();
        let mut entries = Vec::new();
        let mut first_line: HashMap<String, usize> = HashMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = n + 1;
            if raw.trim().is_empty() {
                continue;
            }
            let mut entry: ManifestEntry = match serde_json::from_str(raw) {
                Ok(e) => e,
                Err(e) => {
                    issues.push(ManifestIssue {
                        line,
                        message: format!("malformed entry: {e}"),
                    });
                    continue;
                }
            };
            let mut issue = |message: String| issues.push(ManifestIssue { line, message });
            if let Some(&prev) = first_line.get(&entry.utterance_id) {
                issue(format!("duplicate utterance_id `{}` (first on line {prev})", entry.utterance_id));
            } else {
                first_line.insert(entry.utterance_id.clone(), line);
            }
            let counted = entry.words().len();
            if counted != entry.word_count {
                issue(format!(
                    "{}: word_count {} but transcript has {counted} words",
                    entry.utterance_id, entry.word_count
                ));
            }
            if counted == 0 {
                issue(format!("{}: empty transcript", entry.utterance_id));
            }
            for p in [&mut entry.audio_path, &mut entry.feature_path].into_iter().flatten() {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
            match (&entry.audio_path, &entry.feature_path) {
                (None, None) => issue(format!("{}: needs audio_path or feature_path", entry.utterance_id)),
                (audio, feats) => {
                    if check_files {
                        for p in [audio, feats].into_iter().flatten() {
                            if !p.is_file() {
                                issue(format!("{}: missing file {}", entry.utterance_id, p.display()));
                            }
                        }
                    }
                }
            }
            entries.push(entry);
        }
        if !issues.is_empty() {
            return Err(ManifestError::Invalid(issues));
        }
        Ok(Manifest { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, utterance_id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.utterance_id == utterance_id)
    }

    /// Writes one JSON object per line, with paths relative to `base` when
    /// they live under it.
    pub fn write(&self, path: &Path, base: &Path) -> std::io::Result<()> {
        let mut out = Vec::new();
        for e in &self.entries {
            let mut e = e.clone();
            for p in [&mut e.audio_path, &mut e.feature_path].into_iter().flatten() {
                if let Ok(rel) = p.strip_prefix(base) {
                    *p = rel.to_path_buf();
                }
            }
            serde_json::to_writer(&mut out, &e)?;
            out.push(b'\n');
        }
        fs::File::create(path)?.write_all(&out)
    }
}

pub fn load_manifest(path: &Path) -> Result<Manifest, ManifestError> {
    let text = fs::read_to_string(path).map_err(|source| ManifestError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Manifest::parse(&text, path.parent().unwrap_or(Path::new(".")), true)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(id: &str, t: &str, n: usize) -> String {
        format!(r#"{{"utterance_id":"{id}","feature_path":"f/{id}.fbk","transcript":"{t}","word_count":{n}}}"#)
    }

    #[test]
    fn parses_valid_lines() {
        let text = [line("a", "x y", 2), line("b", "z", 1), line("c", "x y z", 3)].join("\n");
        let m = Manifest::parse(&text, Path::new("/data"), false).unwrap();
        assert_eq!(m.len(), 3);
        assert_eq!(m.entries[0].feature_path, Some(PathBuf::from("/data/f/a.fbk")));
        assert_eq!(m.get("c").unwrap().words(), ["x", "y", "z"]);
    }

    #[test]
    fn duplicate_names_both_lines() {
        let text = [line("a", "x", 1), line("b", "x", 1), line("a", "y", 1)].join("\n");
        let Err(ManifestError::Invalid(issues)) = Manifest::parse(&text, Path::new("."), false) else {
            panic!("expected validation failure");
        };
        assert_eq!(issues.len(), 1);
        assert_eq!(issues[0].line, 3);
        assert!(issues[0].message.contains("`a`") && issues[0].message.contains("line 1"));
    }

    #[test]
    fn word_count_mismatch_and_missing_files_itemized() {
        let text = [line("a", "a b c", 4), "not json".to_string(), line("b", "x", 1)].join("\n");
        let Err(ManifestError::Invalid(issues)) = Manifest::parse(&text, Path::new("/nonexistent"), true) else {
            panic!("expected validation failure");
        };
        let lines: Vec<usize> = issues.iter().map(|i| i.line).collect();
        assert_eq!(lines, [1, 1, 2, 3]);
        assert!(issues[0].message.contains("word_count 4"));
        assert!(issues[1].message.contains("missing file"));
    }

    #[test]
    fn write_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let text = [line("a", "x y", 2), line("b", "z", 1)].join("\n");
        let m = Manifest::parse(&text, dir.path(), false).unwrap();
        let path = dir.path().join("m.jsonl");
        m.write(&path, dir.path()).unwrap();
        let back = Manifest::parse(&fs::read_to_string(&path).unwrap(), dir.path(), false).unwrap();
        assert_eq!(back, m);
        assert!(fs::read_to_string(&path).unwrap().contains(r#""feature_path":"f/a.fbk""#));
    }
}
