//! Edit-distance scoring, length buckets and result tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::targets::Scheme;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("no evaluation pairs")]
    NoPairs,
    #[error("total reference length is zero")]
    EmptyReferences,
    #[error("bucket ranges {first} and {second} overlap")]
    OverlappingBuckets { first: String, second: String },
    #[error("bucket `{0}` has min > max")]
    InvertedBucket(String),
    #[error("pairs mix schemes {0} and {1}")]
    MixedSchemes(Scheme, Scheme),
}

/// Levenshtein distance with unit costs.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalPair {
    pub utterance_id: String,
    pub reference: Vec<usize>,
    pub hypothesis: Vec<usize>,
    pub word_count: usize,
    pub scheme: Scheme,
}

impl EvalPair {
    pub fn distance(&self) -> usize {
        edit_distance(&self.reference, &self.hypothesis)
    }
}

/// Pooled error counts over a set of pairs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ErrorCounts {
    pub errors: usize,
    pub reference_len: usize,
    pub utterances: usize,
}

impl ErrorCounts {
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = &'a EvalPair>) -> Self {
        pairs.into_iter().fold(ErrorCounts::default(), |acc, p| ErrorCounts {
            errors: acc.errors + p.distance(),
            reference_len: acc.reference_len + p.reference.len(),
            utterances: acc.utterances + 1,
        })
    }

    pub fn rate(&self) -> Result<f64, MetricsError> {
        if self.utterances == 0 {
            return Err(MetricsError::NoPairs);
        }
        if self.reference_len == 0 {
            return Err(MetricsError::EmptyReferences);
        }
        Ok(100.0 * self.errors as f64 / self.reference_len as f64)
    }
}

/// Corpus-level error rate in percent: total edits over total reference
/// length.
pub fn error_rate(pairs: &[EvalPair]) -> Result<f64, MetricsError> {
    if let Some(first) = pairs.first() {
        if let Some(p) = pairs.iter().find(|p| p.scheme != first.scheme) {
            return Err(MetricsError::MixedSchemes(first.scheme, p.scheme));
        }
    }
    ErrorCounts::from_pairs(pairs).rate()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BucketRange {
    pub min_words: usize,
    pub max_words: usize,
    pub name: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BucketSpec {
    ranges: Vec<BucketRange>,
}

pub const OTHER_BUCKET: &str = "other";
pub const AVERAGE_COLUMN: &str = "Average";

impl Default for BucketSpec {
    fn default() -> Self {
        BucketSpec::new(vec![(3, 15, "Test1"), (16, 25, "Test2"), (26, 60, "Test3")]).expect("default buckets are disjoint")
    }
}

impl BucketSpec {
    /// Ranges are inclusive and sorted by `min_words`.
    pub fn new<S: Into<String>>(ranges: Vec<(usize, usize, S)>) -> Result<Self, MetricsError> {
        let mut ranges: Vec<BucketRange> = ranges
            .into_iter()
            .map(|(min_words, max_words, name)| BucketRange {
                min_words,
                max_words,
                name: name.into(),
            })
            .collect();
        if let Some(r) = ranges.iter().find(|r| r.min_words > r.max_words) {
            return Err(MetricsError::InvertedBucket(r.name.clone()));
        }
        ranges.sort_by_key(|r| (r.min_words, r.max_words));
        for w in ranges.windows(2) {
            if w[1].min_words <= w[0].max_words {
                return Err(MetricsError::OverlappingBuckets {
                    first: w[0].name.clone(),
                    second: w[1].name.clone(),
                });
            }
        }
        Ok(BucketSpec { ranges })
    }

    /// Parses `"3-15:Test1,16-25:Test2"`.
    pub fn parse(text: &str) -> Result<Self, String> {
        let mut ranges = Vec::new();
        for item in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let (span, name) = item
                .split_once(':')
                .ok_or_else(|| format!("bucket `{item}` is not of the form MIN-MAX:NAME"))?;
            let (lo, hi) = span
                .split_once('-')
                .ok_or_else(|| format!("bucket `{item}` is not of the form MIN-MAX:NAME"))?;
            let lo: usize = lo.trim().parse().map_err(|_| format!("bad bucket bound in `{item}`"))?;
            let hi: usize = hi.trim().parse().map_err(|_| format!("bad bucket bound in `{item}`"))?;
            ranges.push((lo, hi, name.trim().to_string()));
        }
        if ranges.is_empty() {
            return Err("no buckets given".into());
        }
        BucketSpec::new(ranges).map_err(|e| e.to_string())
    }

    pub fn ranges(&self) -> &[BucketRange] {
        &self.ranges
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.ranges.iter().map(|r| r.name.as_str())
    }

    pub fn bucket_of(&self, word_count: usize) -> Option<&str> {
        self.ranges
            .iter()
            .find(|r| (r.min_words..=r.max_words).contains(&word_count))
            .map(|r| r.name.as_str())
    }
}

/// Assigns every pair to its bucket, or to [`OTHER_BUCKET`]. Every configured
/// bucket is present in the result, possibly empty; "other" only when used.
pub fn bucket_by_length<'a>(pairs: &'a [EvalPair], spec: &BucketSpec) -> BTreeMap<String, Vec<&'a EvalPair>> {
    let mut out: BTreeMap<String, Vec<&EvalPair>> = spec.names().map(|n| (n.to_string(), Vec::new())).collect();
    for p in pairs {
        let name = match spec.bucket_of(p.word_count) {
            Some(n) => n,
            None => {
                log::warn!(
                    "utterance {} has {} words, outside every bucket; counted under `{OTHER_BUCKET}`",
                    p.utterance_id,
                    p.word_count
                );
                OTHER_BUCKET
            }
        };
        out.entry(name.to_string()).or_default().push(p);
    }
    out
}

/// Scores of one model: pooled counts per bucket and overall.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelResult {
    pub model: String,
    pub metric: String,
    pub buckets: BTreeMap<String, ErrorCounts>,
    pub average: ErrorCounts,
}

impl ModelResult {
    pub fn score(model: &str, pairs: &[EvalPair], spec: &BucketSpec) -> Result<Self, MetricsError> {
        let metric = pairs.first().ok_or(MetricsError::NoPairs)?.scheme.metric_name().to_string();
        error_rate(pairs)?;
        let buckets = bucket_by_length(pairs, spec)
            .into_iter()
            .map(|(name, ps)| (name, ErrorCounts::from_pairs(ps)))
            .collect();
        Ok(ModelResult {
            model: model.to_string(),
            metric,
            buckets,
            average: ErrorCounts::from_pairs(pairs),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub text: String,
    pub csv: String,
}

fn cell(counts: Option<&ErrorCounts>) -> Option<f64> {
    counts.and_then(|c| c.rate().ok())
}

/// Renders the result table: one row per model, one column per bucket
/// plus the pooled average.
pub fn make_report(results: &[ModelResult], spec: &BucketSpec) -> Report {
    let mut columns: Vec<String> = spec.names().map(str::to_string).collect();
    if results.iter().any(|r| r.buckets.get(OTHER_BUCKET).is_some_and(|c| c.utterances > 0)) {
        columns.push(OTHER_BUCKET.to_string());
    }
    columns.push(AVERAGE_COLUMN.to_string());

    let rows: Vec<(String, Vec<Option<f64>>)> = results
        .iter()
        .map(|r| {
            let label = format!("{} ({})", r.model, r.metric);
            let vals = columns
                .iter()
                .map(|c| if c == AVERAGE_COLUMN { cell(Some(&r.average)) } else { cell(r.buckets.get(c)) })
                .collect();
            (label, vals)
        })
        .collect();

    let first_width = rows.iter().map(|(l, _)| l.chars().count()).chain([5]).max().unwrap_or(5);
    let widths: Vec<usize> = columns.iter().map(|c| c.len().max(6)).collect();
    let mut text = String::new();
    let _ = write!(text, "{:<first_width$}", "Model");
    for (c, w) in columns.iter().zip(&widths) {
        let _ = write!(text, " | {c:>w$}");
    }
    text.push('\n');
    text.push_str(&"-".repeat(first_width));
    for w in &widths {
        text.push_str("-+-");
        text.push_str(&"-".repeat(*w));
    }
    text.push('\n');
    for (label, vals) in &rows {
        let _ = write!(text, "{label:<first_width$}");
        for (v, w) in vals.iter().zip(&widths) {
            match v {
                Some(v) => {
                    let _ = write!(text, " | {v:>w$.2}");
                }
                None => {
                    let _ = write!(text, " | {:>w$}", "-");
                }
            }
        }
        text.push('\n');
    }
    text.push_str("Average pools edits and reference lengths over all utterances; it is not a mean of the bucket rates.\n");

    let mut csv = String::from("model,bucket,metric,value\n");
    for (r, (_, vals)) in results.iter().zip(&rows) {
        for (c, v) in columns.iter().zip(vals) {
            if let Some(v) = v {
                let _ = writeln!(csv, "{},{},{},{:.4}", r.model, c, r.metric, v);
            }
        }
    }
    Report { text, csv }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ids(s: &str) -> Vec<char> {
        s.chars().collect()
    }

    fn pair(id: &str, r: Vec<usize>, h: Vec<usize>, words: usize) -> EvalPair {
        EvalPair {
            utterance_id: id.into(),
            reference: r,
            hypothesis: h,
            word_count: words,
            scheme: Scheme::Reduced,
        }
    }

    /// Breadth-first search over single edits; exact for short strings.
    fn exhaustive_distance(a: &[u8], b: &[u8], alphabet: &[u8]) -> usize {
        use std::collections::{HashSet, VecDeque};
        let mut seen = HashSet::from([a.to_vec()]);
        let mut queue = VecDeque::from([(a.to_vec(), 0usize)]);
        let cap = a.len().max(b.len());
        while let Some((s, d)) = queue.pop_front() {
            if s == b {
                return d;
            }
            let mut next = Vec::new();
            for i in 0..s.len() {
                let mut del = s.clone();
                del.remove(i);
                next.push(del);
                for &c in alphabet {
                    let mut sub = s.clone();
                    sub[i] = c;
                    next.push(sub);
                }
            }
            if s.len() < cap {
                for i in 0..=s.len() {
                    for &c in alphabet {
                        let mut ins = s.clone();
                        ins.insert(i, c);
                        next.push(ins);
                    }
                }
            }
            for n in next {
                if seen.insert(n.clone()) {
                    queue.push_back((n, d + 1));
                }
            }
        }
        unreachable!("target is always reachable")
    }

    #[test]
    fn kitten_sitting() {
        assert_eq!(edit_distance(&ids("kitten"), &ids("sitting")), 3);
        assert_eq!(exhaustive_distance(b"kitten", b"sitting", b"kitensg"), 3);
        assert_eq!(edit_distance(&ids("abc"), &ids("abc")), 0);
        assert_eq!(edit_distance(&ids("abcd"), &ids("")), 4);
        assert_eq!(edit_distance(&ids(""), &ids("ab")), 2);
    }

    #[test]
    fn matches_exhaustive_on_short_strings() {
        let words: Vec<Vec<u8>> = (0..=3)
            .flat_map(|len| {
                (0..3usize.pow(len as u32)).map(move |mut n| {
                    (0..len)
                        .map(|_| {
                            let c = b'a' + (n % 3) as u8;
                            n /= 3;
                            c
                        })
                        .collect()
                })
            })
            .collect();
        for a in &words {
            for b in &words {
                assert_eq!(edit_distance(a, b), exhaustive_distance(a, b, b"abc"), "{a:?} {b:?}");
            }
        }
    }

    #[test]
    fn rate_fixtures() {
        let kitten: Vec<usize> = "kitten".bytes().map(usize::from).collect();
        let sitting: Vec<usize> = "sitting".bytes().map(usize::from).collect();
        assert_eq!(error_rate(&[pair("u", kitten.clone(), sitting, 5)]).unwrap(), 50.0);
        assert_eq!(error_rate(&[pair("u", kitten.clone(), kitten.clone(), 5)]).unwrap(), 0.0);
        assert_eq!(error_rate(&[pair("u", kitten, vec![], 5)]).unwrap(), 100.0);
        assert_eq!(error_rate(&[]), Err(MetricsError::NoPairs));
        let mut mixed = vec![pair("a", vec![1], vec![1], 3), pair("b", vec![1], vec![1], 3)];
        mixed[1].scheme = Scheme::Unified;
        assert!(matches!(error_rate(&mixed), Err(MetricsError::MixedSchemes(..))));
    }

    #[test]
    fn bucket_boundaries_and_other() {
        let spec = BucketSpec::default();
        assert_eq!(spec.bucket_of(15), Some("Test1"));
        assert_eq!(spec.bucket_of(16), Some("Test2"));
        assert_eq!(spec.bucket_of(60), Some("Test3"));
        assert_eq!(spec.bucket_of(2), None);
        let pairs = vec![pair("a", vec![1], vec![1], 2), pair("b", vec![1], vec![1], 15)];
        let b = bucket_by_length(&pairs, &spec);
        assert_eq!(b["other"].len(), 1);
        assert_eq!(b["Test1"].len(), 1);
        assert!(b["Test2"].is_empty());
    }

    #[test]
    fn overlapping_buckets_rejected() {
        assert!(matches!(
            BucketSpec::new(vec![(1, 5, "a"), (5, 9, "b")]),
            Err(MetricsError::OverlappingBuckets { .. })
        ));
        assert!(BucketSpec::new(vec![(4, 2, "x")]).is_err());
        let s = BucketSpec::parse("1-3:Short, 4-5:Mid,6-8:Long").unwrap();
        assert_eq!(s.names().collect::<Vec<_>>(), ["Short", "Mid", "Long"]);
        assert!(BucketSpec::parse("1-3").is_err());
    }

    #[test]
    fn partition_sizes_reproduced() {
        let spec = BucketSpec::default();
        let mut pairs = Vec::new();
        for (n, words) in [(957, 10), (719, 20), (460, 40)] {
            for i in 0..n {
                pairs.push(pair(&format!("{words}-{i}"), vec![0], vec![0], words));
            }
        }
        let b = bucket_by_length(&pairs, &spec);
        assert_eq!(b["Test1"].len(), 957);
        assert_eq!(b["Test2"].len(), 719);
        assert_eq!(b["Test3"].len(), 460);
        assert!(!b.contains_key("other"));
    }

    /// Builds a pair whose distance is exactly `errors` over `len` labels.
    fn pair_with(errors: usize, len: usize, words: usize, id: &str) -> EvalPair {
        let r: Vec<usize> = vec![0; len];
        let mut h = r.clone();
        h[..errors].fill(1);
        pair(id, r, h, words)
    }

    #[test]
    fn report_layout_with_known_average() {
        // 2192 edits over 10000 labels pooled across buckets
        let pairs = vec![
            pair_with(1000, 4000, 10, "a"),
            pair_with(700, 3500, 20, "b"),
            pair_with(492, 2500, 40, "c"),
        ];
        let spec = BucketSpec::default();
        let res = ModelResult::score("attention", &pairs, &spec).unwrap();
        let rep = make_report(&[res], &spec);
        assert!(rep.text.contains("attention (PER)"));
        assert!(rep.text.contains("25.00"));
        assert!(rep.text.contains("20.00"));
        assert!(rep.text.contains("19.68"));
        assert!(rep.text.contains("21.92"));
        assert!(rep.csv.contains("attention,Average,PER,21.9200\n"));
        assert!(!rep.text.contains("other"));
    }

    #[test]
    fn minimal_report_and_determinism() {
        let spec = BucketSpec::new(vec![(1, 9, "All")]).unwrap();
        let pairs = vec![pair("a", vec![1, 2], vec![1], 3)];
        let res = ModelResult::score("m", &pairs, &spec).unwrap();
        let a = make_report(&[res.clone()], &spec);
        let b = make_report(&[res], &spec);
        assert_eq!(a, b);
        let lines: Vec<&str> = a.text.lines().filter(|l| !l.starts_with('-')).collect();
        // header + one model row, then the footer
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0].split('|').count(), 3);
        assert_eq!(a.csv, "model,bucket,metric,value\nm,All,PER,50.0000\nm,Average,PER,50.0000\n");
    }

    #[test]
    fn hand_scored_buckets() {
        let spec = BucketSpec::new(vec![(1, 3, "S"), (4, 6, "L")]).unwrap();
        let pairs = vec![
            pair("1", vec![1, 2, 3], vec![1, 2, 3], 2),
            pair("2", vec![1, 2, 3, 4], vec![1, 3, 4], 3),
            pair("3", vec![5, 5], vec![], 1),
            pair("4", vec![1, 2, 3, 4, 5], vec![1, 2, 9, 4, 5, 6], 5),
            pair("5", vec![7], vec![7], 9),
        ];
        let res = ModelResult::score("m", &pairs, &spec).unwrap();
        // S: (0 + 1 + 2) / 9, L: 2 / 5, other: 0 / 1, all: 5 / 15
        assert!((res.buckets["S"].rate().unwrap() - 100.0 / 3.0).abs() < 1e-12);
        assert_eq!(res.buckets["L"].rate().unwrap(), 40.0);
        assert_eq!(res.buckets["other"].rate().unwrap(), 0.0);
        assert!((res.average.rate().unwrap() - 100.0 / 3.0).abs() < 1e-12);
        let rep = make_report(&[res], &spec);
        assert!(rep.text.contains("other"));
    }

    fn seq() -> impl Strategy<Value = Vec<u8>> {
        prop::collection::vec(0u8..4, 0..10)
    }

    proptest! {
        #[test]
        fn metric_axioms(a in seq(), b in seq(), c in seq()) {
            let ab = edit_distance(&a, &b);
            prop_assert_eq!(ab, edit_distance(&b, &a));
            prop_assert!(edit_distance(&a, &c) <= ab + edit_distance(&b, &c));
            prop_assert!(ab >= a.len().abs_diff(b.len()));
            prop_assert!(ab <= a.len().max(b.len()));
        }

        #[test]
        fn pooled_rate_is_length_weighted_mean(
            items in prop::collection::vec((prop::collection::vec(0usize..4, 1..8), prop::collection::vec(0usize..4, 0..8)), 1..12)
        ) {
            let pairs: Vec<EvalPair> = items
                .into_iter()
                .enumerate()
                .map(|(i, (r, h))| pair(&i.to_string(), r, h, 5))
                .collect();
            let total: usize = pairs.iter().map(|p| p.reference.len()).sum();
            let weighted: f64 = pairs
                .iter()
                .map(|p| 100.0 * p.distance() as f64 / p.reference.len() as f64 * p.reference.len() as f64 / total as f64)
                .sum();
            prop_assert!((error_rate(&pairs).unwrap() - weighted).abs() <= 1e-12 * weighted.max(1.0));
        }
    }
}
