//! Target inventories: unified characters versus reduced common phones.
//!
//! A unified alphabet holds the characters of both scripts; a reduced
//! alphabet holds the shared phone set, and words reach it through a
//! pronunciation lexicon. Both end with the word separator `_`, which is a
//! scored target like any other. The CTC blank is not part of an alphabet;
//! by convention it takes index `len()` of the CTC output layer.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const SEPARATOR: &str = "_";
pub const UNIFIED_FULL_SIZE: usize = 95;
pub const REDUCED_FULL_SIZE: usize = 63;

/// 26 English letters and 68 Devanagari characters, one per line.
pub const UNIFIED_INVENTORY: &str = include_str!("../data/unified_full.txt");
/// The 62 common phones shared by Hindi and English, one per line.
pub const REDUCED_INVENTORY: &str = include_str!("../data/common_phones.txt");

#[derive(Debug, Error)]
pub enum TargetError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("line {line}: duplicate symbol `{symbol}`")]
    DuplicateSymbol { symbol: String, line: usize },
    #[error("alphabet file is empty")]
    EmptyAlphabet,
    #[error("{kind} alphabet has {got} entries including separator, expected {expected}")]
    SizeMismatch {
        kind: Scheme,
        expected: usize,
        got: usize,
    },
    #[error("line {line}: expected `word<TAB>phones`")]
    MalformedLexiconLine { line: usize },
    #[error("line {line}: word `{word}` uses unknown phone `{phone}`")]
    UnknownPhone {
        word: String,
        phone: String,
        line: usize,
    },
    #[error("line {line}: word `{word}` has an empty pronunciation")]
    EmptyPronunciation { word: String, line: usize },
    #[error("unknown character `{ch}` in word `{word}`")]
    UnknownCharacter { ch: char, word: String },
    #[error("out-of-vocabulary words: {}", .0.join(", "))]
    OutOfVocabulary(Vec<String>),
    #[error("empty sentence")]
    EmptySentence,
    #[error("invalid label sequence: {0}")]
    InvalidLabels(String),
    #[error("expected a {expected} alphabet, got {got}")]
    WrongScheme { expected: Scheme, got: Scheme },
    #[error("unknown token `{0}`")]
    UnknownToken(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Unified,
    Reduced,
}

impl Scheme {
    /// Error-rate name used in reports: CER for characters, PER for phones.
    pub fn metric_name(self) -> &'static str {
        match self {
            Scheme::Unified => "CER",
            Scheme::Reduced => "PER",
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scheme::Unified => "unified",
            Scheme::Reduced => "reduced",
        })
    }
}

impl FromStr for Scheme {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "unified" => Ok(Scheme::Unified),
            "reduced" => Ok(Scheme::Reduced),
            other => Err(format!("unknown scheme `{other}` (expected unified or reduced)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Alphabet {
    symbols: Vec<String>,
    index: HashMap<String, usize>,
    separator_id: usize,
    kind: Scheme,
}

impl Alphabet {
    /// Builds an alphabet from symbols in order and appends the separator.
    pub fn new<S: AsRef<str>>(symbols: &[S], kind: Scheme) -> Result<Self, TargetError> {
        let mut out = Vec::with_capacity(symbols.len() + 1);
        let mut index = HashMap::with_capacity(symbols.len() + 1);
        for (i, s) in symbols.iter().enumerate() {
            let s = s.as_ref().to_string();
            if s == SEPARATOR || index.insert(s.clone(), i).is_some() {
                return Err(TargetError::DuplicateSymbol {
                    symbol: s,
                    line: i + 1,
                });
            }
            out.push(s);
        }
        if out.is_empty() {
            return Err(TargetError::EmptyAlphabet);
        }
        let separator_id = out.len();
        index.insert(SEPARATOR.to_string(), separator_id);
        out.push(SEPARATOR.to_string());
        Ok(Alphabet {
            symbols: out,
            index,
            separator_id,
            kind,
        })
    }

    /// Parses one symbol per line. Blank lines are skipped; line numbers in
    /// errors refer to the file.
    pub fn parse(text: &str, kind: Scheme, strict: bool) -> Result<Self, TargetError> {
        let mut seen: HashMap<&str, usize> = HashMap::new();
        let mut symbols = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let sym = raw.trim();
            if sym.is_empty() {
                continue;
            }
            if seen.insert(sym, n + 1).is_some() || sym == SEPARATOR {
                return Err(TargetError::DuplicateSymbol {
                    symbol: sym.to_string(),
                    line: n + 1,
                });
            }
            symbols.push(sym);
        }
        let alphabet = Alphabet::new(&symbols, kind)?;
        if strict {
            let expected = match kind {
                Scheme::Unified => UNIFIED_FULL_SIZE,
                Scheme::Reduced => REDUCED_FULL_SIZE,
            };
            if alphabet.len() != expected {
                return Err(TargetError::SizeMismatch {
                    kind,
                    expected,
                    got: alphabet.len(),
                });
            }
        }
        Ok(alphabet)
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn symbol(&self, id: usize) -> Option<&str> {
        self.symbols.get(id).map(String::as_str)
    }

    pub fn id(&self, symbol: &str) -> Option<usize> {
        self.index.get(symbol).copied()
    }

    pub fn separator_id(&self) -> usize {
        self.separator_id
    }

    /// Index of the CTC blank in an output layer of size `len() + 1`.
    pub fn ctc_blank_id(&self) -> usize {
        self.symbols.len()
    }

    pub fn kind(&self) -> Scheme {
        self.kind
    }

    /// SHA-256 over scheme and symbols, hex encoded.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.kind.to_string().as_bytes());
        for s in &self.symbols {
            h.update([0u8]);
            h.update(s.as_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    fn joiner(&self) -> &'static str {
        match self.kind {
            Scheme::Unified => "",
            Scheme::Reduced => ".",
        }
    }

    /// Maps rendered token strings back to ids.
    pub fn ids_of<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Vec<usize>, TargetError> {
        tokens
            .iter()
            .map(|t| {
                self.id(t.as_ref())
                    .ok_or_else(|| TargetError::UnknownToken(t.as_ref().to_string()))
            })
            .collect()
    }
}

fn read_text(path: &Path) -> Result<String, TargetError> {
    std::fs::read_to_string(path).map_err(|source| TargetError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Loads an alphabet file; `strict` enforces the full inventory sizes
/// (95 unified, 63 reduced).
pub fn load_alphabet(path: &Path, kind: Scheme, strict: bool) -> Result<Alphabet, TargetError> {
    Alphabet::parse(&read_text(path)?, kind, strict)
}

/// Word to phone-id pronunciations over a reduced alphabet.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Lexicon {
    entries: BTreeMap<String, Vec<usize>>,
    duplicates: usize,
}

impl Lexicon {
    /// Parses `word<TAB>phone phone ...` lines. Repeated words keep the last
    /// pronunciation and are counted in [`Lexicon::duplicates`].
    pub fn parse(text: &str, alphabet: &Alphabet) -> Result<Self, TargetError> {
        if alphabet.kind() != Scheme::Reduced {
            return Err(TargetError::WrongScheme {
                expected: Scheme::Reduced,
                got: alphabet.kind(),
            });
        }
        let mut lex = Lexicon::default();
        for (n, raw) in text.lines().enumerate() {
            let line = n + 1;
            if raw.trim().is_empty() {
                continue;
            }
            let (word, pron) = raw
                .split_once('\t')
                .ok_or(TargetError::MalformedLexiconLine { line })?;
            let word = word.trim();
            if word.is_empty() {
                return Err(TargetError::MalformedLexiconLine { line });
            }
            let mut ids = Vec::new();
            for phone in pron.split_whitespace() {
                match alphabet.id(phone) {
                    Some(id) if id != alphabet.separator_id() => ids.push(id),
                    _ => {
                        return Err(TargetError::UnknownPhone {
                            word: word.to_string(),
                            phone: phone.to_string(),
                            line,
                        })
                    }
                }
            }
            if ids.is_empty() {
                return Err(TargetError::EmptyPronunciation {
                    word: word.to_string(),
                    line,
                });
            }
            if lex.entries.insert(word.to_string(), ids).is_some() {
                log::warn!("lexicon line {line}: duplicate word `{word}`, keeping the later pronunciation");
                lex.duplicates += 1;
            }
        }
        Ok(lex)
    }

    pub fn insert(&mut self, word: &str, pronunciation: Vec<usize>) {
        self.entries.insert(word.to_string(), pronunciation);
    }

    pub fn get(&self, word: &str) -> Option<&[usize]> {
        self.entries.get(word).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn duplicates(&self) -> usize {
        self.duplicates
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }
}

pub fn load_lexicon(path: &Path, alphabet: &Alphabet) -> Result<Lexicon, TargetError> {
    let lex = Lexicon::parse(&read_text(path)?, alphabet)?;
    if lex.duplicates > 0 {
        log::warn!("{}: {} duplicate entries", path.display(), lex.duplicates);
    }
    Ok(lex)
}

/// Target ids of one transcript; never contains the blank.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelSequence {
    ids: Vec<usize>,
    scheme: Scheme,
}

impl LabelSequence {
    pub fn new(ids: Vec<usize>, alphabet: &Alphabet) -> Result<Self, TargetError> {
        let sep = alphabet.separator_id();
        let bad = |m: String| Err(TargetError::InvalidLabels(m));
        if ids.is_empty() {
            return bad("empty".into());
        }
        if let Some(&id) = ids.iter().find(|&&id| id >= alphabet.len()) {
            return bad(format!("id {id} outside alphabet of {}", alphabet.len()));
        }
        if ids[0] == sep || ids[ids.len() - 1] == sep {
            return bad("leading or trailing separator".into());
        }
        if ids.windows(2).any(|w| w[0] == sep && w[1] == sep) {
            return bad("doubled separator".into());
        }
        Ok(LabelSequence {
            ids,
            scheme: alphabet.kind(),
        })
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Splits a transcript on whitespace.
pub fn split_words(transcript: &str) -> Vec<&str> {
    transcript.split_whitespace().collect()
}

pub fn tokenize_unified<S: AsRef<str>>(
    sentence: &[S],
    alphabet: &Alphabet,
) -> Result<LabelSequence, TargetError> {
    if alphabet.kind() != Scheme::Unified {
        return Err(TargetError::WrongScheme {
            expected: Scheme::Unified,
            got: alphabet.kind(),
        });
    }
    if sentence.is_empty() {
        return Err(TargetError::EmptySentence);
    }
    let mut ids = Vec::new();
    let mut buf = [0u8; 4];
    for (w, word) in sentence.iter().enumerate() {
        let word = word.as_ref();
        if w > 0 {
            ids.push(alphabet.separator_id());
        }
        for ch in word.chars() {
            match alphabet.id(ch.encode_utf8(&mut buf)) {
                Some(id) if id != alphabet.separator_id() => ids.push(id),
                _ => {
                    return Err(TargetError::UnknownCharacter {
                        ch,
                        word: word.to_string(),
                    })
                }
            }
        }
    }
    LabelSequence::new(ids, alphabet)
}

/// Concatenates lexicon pronunciations with separators between words.
pub fn tokenize_reduced<S: AsRef<str>>(
    sentence: &[S],
    lexicon: &Lexicon,
    alphabet: &Alphabet,
) -> Result<LabelSequence, TargetError> {
    if alphabet.kind() != Scheme::Reduced {
        return Err(TargetError::WrongScheme {
            expected: Scheme::Reduced,
            got: alphabet.kind(),
        });
    }
    if sentence.is_empty() {
        return Err(TargetError::EmptySentence);
    }
    let oov: Vec<String> = sentence
        .iter()
        .map(AsRef::as_ref)
        .filter(|w| lexicon.get(w).is_none())
        .map(str::to_string)
        .collect();
    if !oov.is_empty() {
        return Err(TargetError::OutOfVocabulary(oov));
    }
    let mut ids = Vec::new();
    for (w, word) in sentence.iter().enumerate() {
        if w > 0 {
            ids.push(alphabet.separator_id());
        }
        ids.extend_from_slice(lexicon.get(word.as_ref()).expect("checked above"));
    }
    LabelSequence::new(ids, alphabet)
}

/// Tokenizes a word sequence under whichever scheme `alphabet` carries.
pub fn tokenize<S: AsRef<str>>(
    sentence: &[S],
    alphabet: &Alphabet,
    lexicon: Option<&Lexicon>,
) -> Result<LabelSequence, TargetError> {
    match (alphabet.kind(), lexicon) {
        (Scheme::Unified, _) => tokenize_unified(sentence, alphabet),
        (Scheme::Reduced, Some(lex)) => tokenize_reduced(sentence, lex, alphabet),
        (Scheme::Reduced, None) => Err(TargetError::OutOfVocabulary(
            sentence.iter().map(|w| w.as_ref().to_string()).collect(),
        )),
    }
}

/// Splits ids on the separator and renders each word. Characters are
/// concatenated; phones are joined with `.`. Empty words (from stray
/// separators in hypotheses) are dropped.
pub fn detokenize(ids: &[usize], alphabet: &Alphabet) -> Vec<String> {
    ids.split(|&id| id == alphabet.separator_id())
        .filter(|w| !w.is_empty())
        .map(|w| {
            w.iter()
                .map(|&id| alphabet.symbol(id).unwrap_or("?"))
                .collect::<Vec<_>>()
                .join(alphabet.joiner())
        })
        .collect()
}

/// Token strings for each id, separator included.
pub fn token_strings(ids: &[usize], alphabet: &Alphabet) -> Vec<String> {
    ids.iter()
        .map(|&id| alphabet.symbol(id).unwrap_or("?").to_string())
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TargetSetStats {
    pub unified_size: usize,
    pub reduced_size: usize,
    /// Rounded to one decimal.
    pub reduction_percent: f64,
}

impl TargetSetStats {
    pub fn from_sizes(unified_size: usize, reduced_size: usize) -> Self {
        let raw = if unified_size == 0 {
            0.0
        } else {
            100.0 * (unified_size as f64 - reduced_size as f64) / unified_size as f64
        };
        TargetSetStats {
            unified_size,
            reduced_size,
            reduction_percent: (raw * 10.0).round() / 10.0,
        }
    }
}

impl fmt::Display for TargetSetStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "unified targets: {}\nreduced targets: {}\nreduction: {:.1}%",
            self.unified_size, self.reduced_size, self.reduction_percent
        )
    }
}

pub fn target_set_stats(unified: &Alphabet, reduced: &Alphabet) -> TargetSetStats {
    TargetSetStats::from_sizes(unified.len(), reduced.len())
}

/// Distinct non-separator targets used across tokenized words.
pub fn unique_targets<'a>(seqs: impl IntoIterator<Item = &'a LabelSequence>, alphabet: &Alphabet) -> usize {
    seqs.into_iter()
        .flat_map(|s| s.ids().iter().copied())
        .filter(|&id| id != alphabet.separator_id())
        .collect::<BTreeSet<_>>()
        .len()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_inventories_have_full_sizes() {
        let u = Alphabet::parse(UNIFIED_INVENTORY, Scheme::Unified, true).unwrap();
        let r = Alphabet::parse(REDUCED_INVENTORY, Scheme::Reduced, true).unwrap();
        assert_eq!((u.len(), r.len()), (95, 63));
        assert_eq!(target_set_stats(&u, &r).reduction_percent, 33.7);
    }

    fn latin() -> Alphabet {
        let letters: Vec<String> = ('a'..='z').map(String::from).collect();
        Alphabet::new(&letters, Scheme::Unified).unwrap()
    }

    fn phones() -> Alphabet {
        Alphabet::new(&["g", "oo", "h", "m", "k", "ae", "t", "a"], Scheme::Reduced).unwrap()
    }

    #[test]
    fn alphabet_parse_appends_separator() {
        let a = Alphabet::parse("x\ny\n\nz\n", Scheme::Unified, false).unwrap();
        assert_eq!(a.len(), 4);
        assert_eq!(a.symbol(a.separator_id()), Some(SEPARATOR));
        assert_eq!(a.ctc_blank_id(), 4);
    }

    #[test]
    fn alphabet_duplicate_reports_second_line() {
        match Alphabet::parse("a\nb\na\n", Scheme::Unified, false) {
            Err(TargetError::DuplicateSymbol { symbol, line }) => {
                assert_eq!((symbol.as_str(), line), ("a", 3))
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            Alphabet::parse("\n\n", Scheme::Unified, false),
            Err(TargetError::EmptyAlphabet)
        ));
        assert!(matches!(
            Alphabet::parse("a\nb", Scheme::Reduced, true),
            Err(TargetError::SizeMismatch { expected: 63, got: 3, .. })
        ));
    }

    #[test]
    fn lexicon_parse_and_errors() {
        let p = phones();
        let lex = Lexicon::parse("cat\tk ae t\n", &p).unwrap();
        assert_eq!(lex.get("cat").unwrap(), &[4, 5, 6]);

        match Lexicon::parse("cat\tk zz t\n", &p) {
            Err(TargetError::UnknownPhone { word, phone, line }) => {
                assert_eq!((word.as_str(), phone.as_str(), line), ("cat", "zz", 1))
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            Lexicon::parse("cat\t  \n", &p),
            Err(TargetError::EmptyPronunciation { .. })
        ));
        assert!(matches!(
            Lexicon::parse("cat k ae t\n", &p),
            Err(TargetError::MalformedLexiconLine { line: 1 })
        ));
    }

    #[test]
    fn lexicon_duplicates_last_wins() {
        let lex = Lexicon::parse("go\tg a\ngo\tg oo\n", &phones()).unwrap();
        assert_eq!(lex.duplicates(), 1);
        assert_eq!(lex.get("go").unwrap(), &[0, 1]);
        assert_eq!(lex.len(), 1);
    }

    #[test]
    fn unified_tokenization() {
        let a = latin();
        let sep = a.separator_id();
        let seq = tokenize_unified(&["go", "home"], &a).unwrap();
        let id = |c: &str| a.id(c).unwrap();
        assert_eq!(
            seq.ids(),
            &[id("g"), id("o"), sep, id("h"), id("o"), id("m"), id("e")]
        );
        assert_eq!(detokenize(seq.ids(), &a), vec!["go", "home"]);
        assert_eq!(tokenize_unified(&["a"], &a).unwrap().ids(), &[0]);
        assert_eq!(detokenize(&[0], &a), vec!["a"]);
        match tokenize_unified(&["go", "hömé"], &a) {
            Err(TargetError::UnknownCharacter { ch, word }) => {
                assert_eq!((ch, word.as_str()), ('ö', "hömé"))
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn reduced_tokenization() {
        let p = phones();
        let lex = Lexicon::parse("go\tg oo\nhome\th oo m\n", &p).unwrap();
        let seq = tokenize_reduced(&["go", "home"], &lex, &p).unwrap();
        assert_eq!(seq.ids(), &[0, 1, p.separator_id(), 2, 1, 3]);
        assert_eq!(tokenize_reduced(&["home"], &lex, &p).unwrap().ids(), &[2, 1, 3]);
        match tokenize_reduced(&["go", "away", "now"], &lex, &p) {
            Err(TargetError::OutOfVocabulary(w)) => assert_eq!(w, vec!["away", "now"]),
            other => panic!("{other:?}"),
        }
        assert_eq!(detokenize(seq.ids(), &p), vec!["g.oo", "h.oo.m"]);
    }

    #[test]
    fn cross_script_words_share_phone_targets() {
        // "घर" (Hindi) and "go" (English) both realize the phone `oo`/`g`.
        let p = phones();
        let lex = Lexicon::parse("घर\tg oo\ngo\tg oo\n", &p).unwrap();
        let seq = tokenize_reduced(&["घर", "go"], &lex, &p).unwrap();
        assert_eq!(seq.ids()[1], seq.ids()[4]);
        assert_eq!(seq.ids()[0], seq.ids()[3]);
    }

    #[test]
    fn label_sequence_invariants() {
        let a = latin();
        let s = a.separator_id();
        assert!(LabelSequence::new(vec![], &a).is_err());
        assert!(LabelSequence::new(vec![s, 0], &a).is_err());
        assert!(LabelSequence::new(vec![0, s], &a).is_err());
        assert!(LabelSequence::new(vec![0, s, s, 1], &a).is_err());
        assert!(LabelSequence::new(vec![0, a.ctc_blank_id()], &a).is_err());
        assert!(LabelSequence::new(vec![0, s, 1], &a).is_ok());
    }

    #[test]
    fn stats_fixtures() {
        assert_eq!(TargetSetStats::from_sizes(95, 63).reduction_percent, 33.7);
        assert_eq!(TargetSetStats::from_sizes(40, 40).reduction_percent, 0.0);
        assert_eq!(TargetSetStats::from_sizes(22, 12).reduction_percent, 45.5);
    }

    #[test]
    fn fingerprint_depends_on_scheme_and_symbols() {
        let a = Alphabet::new(&["a", "b"], Scheme::Unified).unwrap();
        let b = Alphabet::new(&["a", "b"], Scheme::Reduced).unwrap();
        let c = Alphabet::new(&["b", "a"], Scheme::Unified).unwrap();
        assert_ne!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.fingerprint(), c.fingerprint());
        assert_eq!(a.fingerprint(), a.clone().fingerprint());
    }
}
