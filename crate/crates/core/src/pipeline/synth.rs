//! Seeded synthetic code-switched corpus.
//!
//! Every phone owns a spectral template: a contiguous band of raised
//! log-energy across the feature dimensions. A word is a fixed random
//! phone string, spelled either in Latin or in Devanagari letters (one
//! letter per phone), which gives the unified scheme twice the targets of
//! the reduced one. Utterances concatenate phone templates for 3–8 frames
//! each, with short silent gaps between words, plus Gaussian noise.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::manifest::{Manifest, ManifestEntry};
use super::PipelineError;
use crate::features::{write_feature_file, FeatureMatrix};
use crate::numerics::Matrix;

/// Phone name, Latin letter, Devanagari letter.
const INVENTORY: [(&str, &str, &str); 20] = [
    ("a", "a", "अ"),
    ("i", "i", "इ"),
    ("u", "u", "उ"),
    ("e", "e", "ए"),
    ("o", "o", "ओ"),
    ("k", "k", "क"),
    ("g", "g", "ग"),
    ("t", "t", "त"),
    ("d", "d", "द"),
    ("n", "n", "न"),
    ("p", "p", "प"),
    ("b", "b", "ब"),
    ("m", "m", "म"),
    ("r", "r", "र"),
    ("l", "l", "ल"),
    ("s", "s", "स"),
    ("h", "h", "ह"),
    ("j", "j", "ज"),
    ("v", "v", "व"),
    ("y", "y", "य"),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub vocab_size: usize,
    pub num_utterances: usize,
    pub phone_count: usize,
    pub feature_dim: usize,
    pub phones_per_word: (usize, usize),
    pub words_per_utterance: (usize, usize),
    pub frames_per_token: (usize, usize),
    pub gap_frames: (usize, usize),
    pub template_gain: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            vocab_size: 8,
            num_utterances: 200,
            phone_count: 10,
            feature_dim: 26,
            phones_per_word: (2, 3),
            words_per_utterance: (1, 6),
            frames_per_token: (3, 8),
            gap_frames: (2, 3),
            template_gain: 3.0,
            noise_sigma: 0.3,
            seed: 1,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Usage(m));
        if self.vocab_size < 2 {
            return bad("vocab_size must be >= 2".into());
        }
        if self.phone_count < 2 || self.phone_count > INVENTORY.len() {
            return bad(format!("phone_count must be in 2..={}", INVENTORY.len()));
        }
        if self.feature_dim < self.phone_count {
            return bad("feature_dim must be >= phone_count".into());
        }
        if self.num_utterances < 10 {
            return bad("num_utterances must be >= 10 for a 70/10/20 split".into());
        }
        for (name, (lo, hi)) in [
            ("phones_per_word", self.phones_per_word),
            ("words_per_utterance", self.words_per_utterance),
            ("frames_per_token", self.frames_per_token),
        ] {
            if lo == 0 || lo > hi {
                return bad(format!("{name} range must satisfy 1 <= min <= max"));
            }
        }
        if self.gap_frames.0 > self.gap_frames.1 {
            return bad("gap_frames range must satisfy min <= max".into());
        }
        let (lo, hi) = self.phones_per_word;
        let distinct: usize = (lo..=hi).map(|n| self.phone_count.pow(n as u32)).sum();
        if distinct < self.vocab_size {
            return bad("not enough distinct pronunciations for vocab_size".into());
        }
        if !(self.noise_sigma >= 0.0 && self.template_gain > 0.0) {
            return bad("noise_sigma must be >= 0 and template_gain > 0".into());
        }
        Ok(())
    }

    fn band_width(&self) -> usize {
        (self.feature_dim / self.phone_count).max(1)
    }

    /// Template of phone `p`: `template_gain` on its band, 0 elsewhere.
    pub fn template(&self, phone: usize) -> Vec<f64> {
        let w = self.band_width();
        let start = phone * self.feature_dim / self.phone_count;
        let mut t = vec![0.0; self.feature_dim];
        for v in &mut t[start..(start + w).min(self.feature_dim)] {
            *v = self.template_gain;
        }
        t
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SynthWord {
    pub spelling: String,
    pub phones: Vec<usize>,
}

/// Draws the vocabulary: distinct pronunciations, alternating scripts.
pub fn synth_vocabulary(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Vec<SynthWord> {
    let mut words: Vec<SynthWord> = Vec::with_capacity(spec.vocab_size);
    while words.len() < spec.vocab_size {
        let n = rng.random_range(spec.phones_per_word.0..=spec.phones_per_word.1);
        let phones: Vec<usize> = (0..n).map(|_| rng.random_range(0..spec.phone_count)).collect();
        if words.iter().any(|w| w.phones == phones) {
            continue;
        }
        let latin = words.len().is_multiple_of(2);
        let spelling = phones
            .iter()
            .map(|&p| if latin { INVENTORY[p].1 } else { INVENTORY[p].2 })
            .collect();
        words.push(SynthWord { spelling, phones });
    }
    words
}

/// Renders a word sequence. Returns the frames and, per frame, the phone
/// that generated it (`None` for gaps).
pub fn render_utterance(
    spec: &SynthSpec,
    words: &[&SynthWord],
    rng: &mut ChaCha8Rng,
    noisy: bool,
) -> (Matrix, Vec<Option<usize>>) {
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (i, w) in words.iter().enumerate() {
        if i > 0 {
            for _ in 0..rng.random_range(spec.gap_frames.0..=spec.gap_frames.1) {
                rows.push(vec![0.0; spec.feature_dim]);
                labels.push(None);
            }
        }
        for &p in &w.phones {
            for _ in 0..rng.random_range(spec.frames_per_token.0..=spec.frames_per_token.1) {
                rows.push(spec.template(p));
                labels.push(Some(p));
            }
        }
    }
    if noisy && spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, spec.noise_sigma).expect("sigma checked");
        for row in &mut rows {
            for v in row.iter_mut() {
                *v += normal.sample(rng);
            }
        }
    }
    (Matrix::from_rows(&rows), labels)
}

#[derive(Clone, Debug)]
pub struct SynthCorpus {
    pub train: PathBuf,
    pub dev: PathBuf,
    pub test: PathBuf,
    pub unified_alphabet: PathBuf,
    pub reduced_alphabet: PathBuf,
    pub lexicon: PathBuf,
    pub sizes: (usize, usize, usize),
}

/// Writes features, manifests, alphabets and lexicon under `out_dir`.
pub fn generate_synthetic_corpus(spec: &SynthSpec, out_dir: &Path) -> Result<SynthCorpus, PipelineError> {
    spec.validate()?;
    let feat_dir = out_dir.join("features");
    fs::create_dir_all(&feat_dir).map_err(|e| PipelineError::io(&feat_dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let vocab = synth_vocabulary(spec, &mut rng);

    let mut entries = Vec::with_capacity(spec.num_utterances);
    for u in 0..spec.num_utterances {
        let n = rng.random_range(spec.words_per_utterance.0..=spec.words_per_utterance.1);
        let words: Vec<&SynthWord> = (0..n).map(|_| &vocab[rng.random_range(0..vocab.len())]).collect();
        let (frames, _) = render_utterance(spec, &words, &mut rng, true);
        let id = format!("utt{u:04}");
        let path = feat_dir.join(format!("{id}.fbk"));
        write_feature_file(&path, &FeatureMatrix::new(frames, id.clone())?)?;
        entries.push(ManifestEntry {
            utterance_id: id,
            audio_path: None,
            feature_path: Some(path),
            transcript: words.iter().map(|w| w.spelling.as_str()).collect::<Vec<_>>().join(" "),
            word_count: n,
        });
    }
    entries.shuffle(&mut rng);
    let n_train = spec.num_utterances * 7 / 10;
    let n_dev = spec.num_utterances / 10;
    let mut test_entries = entries.split_off(n_train + n_dev);
    let mut dev_entries = entries.split_off(n_train);
    let mut train_entries = entries;
    for part in [&mut train_entries, &mut dev_entries, &mut test_entries] {
        part.sort_by(|a, b| a.utterance_id.cmp(&b.utterance_id));
    }
    let sizes = (train_entries.len(), dev_entries.len(), test_entries.len());

    let write_manifest = |name: &str, entries: Vec<ManifestEntry>| -> Result<PathBuf, PipelineError> {
        let path = out_dir.join(name);
        Manifest { entries }
            .write(&path, out_dir)
            .map_err(|e| PipelineError::io(&path, e))?;
        Ok(path)
    };
    let write_text = |name: &str, text: String| -> Result<PathBuf, PipelineError> {
        let path = out_dir.join(name);
        fs::write(&path, text).map_err(|e| PipelineError::io(&path, e))?;
        Ok(path)
    };

    let phones = &INVENTORY[..spec.phone_count];
    let reduced: String = phones.iter().map(|(p, _, _)| format!("{p}\n")).collect();
    let unified: String = phones
        .iter()
        .map(|(_, l, _)| format!("{l}\n"))
        .chain(phones.iter().map(|(_, _, d)| format!("{d}\n")))
        .collect();
    let lexicon: String = vocab
        .iter()
        .map(|w| {
            let pron: Vec<&str> = w.phones.iter().map(|&p| INVENTORY[p].0).collect();
            format!("{}\t{}\n", w.spelling, pron.join(" "))
        })
        .collect();

    Ok(SynthCorpus {
        train: write_manifest("train.jsonl", train_entries)?,
        dev: write_manifest("dev.jsonl", dev_entries)?,
        test: write_manifest("test.jsonl", test_entries)?,
        unified_alphabet: write_text("unified.txt", unified)?,
        reduced_alphabet: write_text("reduced.txt", reduced)?,
        lexicon: write_text("lexicon.tsv", lexicon)?,
        sizes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::dot;
    use crate::pipeline::manifest::load_manifest;
    use crate::targets::{load_alphabet, load_lexicon, tokenize, Scheme};

    fn small() -> SynthSpec {
        SynthSpec {
            num_utterances: 20,
            ..SynthSpec::default()
        }
    }

    fn dir_bytes(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
        let mut out = Vec::new();
        let mut stack = vec![dir.to_path_buf()];
        while let Some(d) = stack.pop() {
            for e in fs::read_dir(&d).unwrap() {
                let p = e.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
                }
            }
        }
        out.sort();
        out
    }

    #[test]
    fn seeded_corpus_is_byte_identical() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        generate_synthetic_corpus(&small(), a.path()).unwrap();
        generate_synthetic_corpus(&small(), b.path()).unwrap();
        assert_eq!(dir_bytes(a.path()), dir_bytes(b.path()));
        let c = tempfile::tempdir().unwrap();
        generate_synthetic_corpus(&SynthSpec { seed: 2, ..small() }, c.path()).unwrap();
        assert_ne!(dir_bytes(a.path()), dir_bytes(c.path()));
    }

    #[test]
    fn split_sizes_and_tokenization() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = generate_synthetic_corpus(&SynthSpec::default(), dir.path()).unwrap();
        assert_eq!(corpus.sizes, (140, 20, 40));
        let reduced = load_alphabet(&corpus.reduced_alphabet, Scheme::Reduced, false).unwrap();
        let unified = load_alphabet(&corpus.unified_alphabet, Scheme::Unified, false).unwrap();
        assert_eq!(reduced.len(), 11);
        assert_eq!(unified.len(), 21);
        let lexicon = load_lexicon(&corpus.lexicon, &reduced).unwrap();
        assert_eq!(lexicon.len(), 8);
        let mut total = 0;
        for m in [&corpus.train, &corpus.dev, &corpus.test] {
            let m = load_manifest(m).unwrap();
            total += m.len();
            for e in &m.entries {
                let words = e.words();
                let r = tokenize(&words, &reduced, Some(&lexicon)).unwrap();
                let u = tokenize(&words, &unified, None).unwrap();
                // one letter per phone in either script
                assert_eq!(r.len(), u.len());
                let feats = e.load_features(&Default::default()).unwrap();
                assert_eq!(feats.dim(), 26);
            }
        }
        assert_eq!(total, 200);
    }

    #[test]
    fn templates_separable_by_nearest_neighbour() {
        let spec = SynthSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let vocab = synth_vocabulary(&spec, &mut rng);
        let mut templates: Vec<(Option<usize>, Vec<f64>)> =
            (0..spec.phone_count).map(|p| (Some(p), spec.template(p))).collect();
        templates.push((None, vec![0.0; spec.feature_dim]));
        let mut checked = 0;
        for _ in 0..30 {
            let words: Vec<&SynthWord> = (0..4).map(|_| &vocab[rng.random_range(0..vocab.len())]).collect();
            let (frames, labels) = render_utterance(&spec, &words, &mut rng, false);
            for (t, label) in labels.iter().enumerate() {
                let x = frames.row(t);
                let nearest = templates
                    .iter()
                    .min_by(|a, b| {
                        let da: f64 = x.iter().zip(&a.1).map(|(p, q)| (p - q).powi(2)).sum();
                        let db: f64 = x.iter().zip(&b.1).map(|(p, q)| (p - q).powi(2)).sum();
                        da.total_cmp(&db)
                    })
                    .unwrap();
                assert_eq!(nearest.0, *label);
                checked += 1;
            }
        }
        assert!(checked > 300);
        // bands never coincide
        for p in 0..spec.phone_count {
            for q in 0..p {
                assert!(dot(&spec.template(p), &spec.template(q)) < spec.template_gain.powi(2) * spec.band_width() as f64);
            }
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(SynthSpec { vocab_size: 1, ..small() }.validate().is_err());
        assert!(SynthSpec { phone_count: 30, ..small() }.validate().is_err());
        assert!(SynthSpec { frames_per_token: (0, 3), ..small() }.validate().is_err());
        assert!(SynthSpec { phone_count: 2, phones_per_word: (1, 1), vocab_size: 3, ..small() }.validate().is_err());
    }
}
