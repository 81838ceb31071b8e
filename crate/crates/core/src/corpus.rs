//! Snapshot ingestion: tokenization, preprocessing and deterministic splits.
//!
//! A [`Snapshot`] is a corpus slice taken at one timestamp. Documents are kept
//! as contiguous runs of sentences so that deduplication and splitting operate
//! at document granularity while all statistics are computed per sentence.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

/// Sentence terminators. A terminator only ends a sentence when followed by
/// whitespace or the end of the text.
const TERMINATORS: [char; 3] = ['.', '!', '?'];

fn is_token_char(c: char) -> bool {
    c.is_alphanumeric() || c == '\''
}

/// Lowercase `text` and split it into maximal runs of alphanumerics and
/// apostrophes. Runs made only of apostrophes are dropped.
pub fn tokenize_words(text: &str) -> Vec<String> {
    let lowered = text.to_lowercase();
    lowered
        .split(|c: char| !is_token_char(c))
        .filter(|t| t.chars().any(char::is_alphanumeric))
        .map(str::to_owned)
        .collect()
}

/// Split `text` into sentences and tokenize each one. Sentences without any
/// token are dropped, so every returned sentence is non-empty.
pub fn tokenize(text: &str) -> Vec<Vec<String>> {
    let mut sentences = Vec::new();
    let mut start = 0;
    let mut chars = text.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        if TERMINATORS.contains(&c) {
            let at_boundary = match chars.peek() {
                None => true,
                Some(&(_, next)) => next.is_whitespace(),
            };
            if at_boundary {
                let end = i + c.len_utf8();
                push_sentence(&mut sentences, &text[start..end]);
                start = end;
            }
        }
    }
    push_sentence(&mut sentences, &text[start..]);
    sentences
}

fn push_sentence(out: &mut Vec<Vec<String>>, raw: &str) {
    let tokens = tokenize_words(raw);
    if !tokens.is_empty() {
        out.push(tokens);
    }
}

/// Bidirectional token ↔ id mapping. Ids are assigned in order of first
/// appearance.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocab {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn intern(&mut self, word: &str) -> TokenId {
        if let Some(&id) = self.index.get(word) {
            return id;
        }
        let id = TokenId::try_from(self.words.len()).expect("vocabulary exceeds u32 ids");
        self.words.push(word.to_owned());
        self.index.insert(word.to_owned(), id);
        id
    }

    pub fn id(&self, word: &str) -> Option<TokenId> {
        self.index.get(word).copied()
    }

    /// Panics on an id that was not produced by this vocabulary.
    pub fn word(&self, id: TokenId) -> &str {
        &self.words[id as usize]
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (TokenId, &str)> + '_ {
        self.words
            .iter()
            .enumerate()
            .map(|(i, w)| (i as TokenId, w.as_str()))
    }
}

/// A tokenized, timestamped corpus slice.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Snapshot {
    label: String,
    sentences: Vec<Vec<TokenId>>,
    /// `doc_starts[d]..doc_starts[d + 1]` indexes the sentences of document `d`.
    doc_starts: Vec<usize>,
    vocab: Vocab,
}

impl Snapshot {
    /// Build a snapshot from raw documents. Documents that yield no token are
    /// dropped; the order of the remaining ones is preserved.
    pub fn from_documents<S>(label: impl Into<String>, documents: &[S]) -> Self
    where
        S: AsRef<str> + Sync,
    {
        let tokenized: Vec<Vec<Vec<String>>> =
            documents.par_iter().map(|d| tokenize(d.as_ref())).collect();
        Self::from_tokenized(label, tokenized)
    }

    /// Build a snapshot from documents that are already split into sentences
    /// of tokens. Empty sentences and empty documents are dropped.
    pub fn from_tokenized<D, S, T>(label: impl Into<String>, documents: D) -> Self
    where
        D: IntoIterator<Item = S>,
        S: IntoIterator<Item = Vec<T>>,
        T: AsRef<str>,
    {
        let mut vocab = Vocab::new();
        let mut sentences = Vec::new();
        let mut doc_starts = vec![0];
        for doc in documents {
            let before = sentences.len();
            for sentence in doc {
                if sentence.is_empty() {
                    continue;
                }
                sentences.push(sentence.iter().map(|t| vocab.intern(t.as_ref())).collect());
            }
            if sentences.len() > before {
                doc_starts.push(sentences.len());
            }
        }
        Snapshot {
            label: label.into(),
            sentences,
            doc_starts,
            vocab,
        }
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn sentences(&self) -> &[Vec<TokenId>] {
        &self.sentences
    }

    pub fn n_sentences(&self) -> usize {
        self.sentences.len()
    }

    pub fn n_documents(&self) -> usize {
        self.doc_starts.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn document(&self, d: usize) -> &[Vec<TokenId>] {
        &self.sentences[self.doc_starts[d]..self.doc_starts[d + 1]]
    }

    pub fn documents(&self) -> impl Iterator<Item = &[Vec<TokenId>]> + '_ {
        (0..self.n_documents()).map(move |d| self.document(d))
    }

    pub fn sentence_words(&self, s: usize) -> impl Iterator<Item = &str> + '_ {
        self.sentences[s].iter().map(move |&id| self.vocab.word(id))
    }

    /// Sentence `s` as space-joined tokens.
    pub fn sentence_text(&self, s: usize) -> String {
        self.sentence_words(s).collect::<Vec<_>>().join(" ")
    }

    /// Document `d` rendered so that re-tokenizing it reproduces its sentences.
    pub fn document_text(&self, d: usize) -> String {
        let range = self.doc_starts[d]..self.doc_starts[d + 1];
        range
            .map(|s| self.sentence_text(s))
            .collect::<Vec<_>>()
            .join(". ")
    }

    /// A new snapshot made of the given documents, in the given order, with a
    /// freshly built vocabulary.
    fn select_documents(&self, docs: impl IntoIterator<Item = usize>) -> Snapshot {
        Snapshot::from_tokenized(
            self.label.clone(),
            docs.into_iter().map(|d| {
                self.document(d)
                    .iter()
                    .map(|s| s.iter().map(|&id| self.vocab.word(id)).collect::<Vec<_>>())
                    .collect::<Vec<_>>()
            }),
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputFormat {
    /// One document per line.
    Lines,
    /// Newline-delimited JSON records with a `text` field.
    Records,
}

impl std::str::FromStr for InputFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lines" => Ok(InputFormat::Lines),
            "records" => Ok(InputFormat::Records),
            other => Err(Error::InvalidArgument(format!(
                "unknown input format {other:?}, expected \"lines\" or \"records\""
            ))),
        }
    }
}

#[derive(Deserialize)]
struct Record {
    text: String,
    // Accepted but unused: the snapshot label is supplied by the caller.
    #[allow(dead_code)]
    #[serde(default)]
    timestamp: Option<serde_json::Value>,
}

pub fn load_snapshot(path: &Path, format: InputFormat, label: &str) -> Result<Snapshot> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let text = String::from_utf8(bytes)
        .map_err(|e| Error::parse(path, 0, format!("invalid UTF-8: {e}")))?;

    let mut documents = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match format {
            InputFormat::Lines => documents.push(line.to_owned()),
            InputFormat::Records => {
                let record: Record = serde_json::from_str(line)
                    .map_err(|e| Error::parse(path, i + 1, format!("malformed record: {e}")))?;
                documents.push(record.text);
            }
        }
    }

    let snapshot = Snapshot::from_documents(label, &documents);
    if snapshot.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Ok(snapshot)
}

/// Remove exact-duplicate documents (first occurrence kept) and documents with
/// fewer than `min_words` tokens.
pub fn preprocess(snapshot: &Snapshot, min_words: usize) -> Result<Snapshot> {
    if min_words == 0 {
        return Err(Error::InvalidArgument("min_words must be at least 1".into()));
    }
    let mut seen: HashSet<&[Vec<TokenId>]> = HashSet::new();
    let keep: Vec<usize> = (0..snapshot.n_documents())
        .filter(|&d| {
            let doc = snapshot.document(d);
            let words: usize = doc.iter().map(Vec::len).sum();
            words >= min_words && seen.insert(doc)
        })
        .collect();
    if keep.is_empty() {
        return Err(Error::EmptyAfterPreprocessing);
    }
    Ok(snapshot.select_documents(keep))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSpec {
    pub train: f64,
    pub dev: f64,
    pub test: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(train: f64, dev: f64, test: f64, seed: u64) -> Result<Self> {
        let spec = SplitSpec {
            train,
            dev,
            test,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.dev, self.test];
        if parts.iter().any(|f| !f.is_finite() || *f < 0.0 || *f > 1.0) {
            return Err(Error::InvalidSplit(format!(
                "each fraction must lie in [0, 1], got {parts:?}"
            )));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidSplit(format!("fractions sum to {sum}, not 1")));
        }
        Ok(())
    }

    /// Document counts per part by the largest-remainder method. Ties in the
    /// remainder go to the earlier part, so train absorbs leftovers first.
    pub fn sizes(&self, n: usize) -> [usize; 3] {
        let quotas = [self.train, self.dev, self.test].map(|f| f * n as f64);
        // Guard against products like 0.7 * 10 landing just below an integer.
        let mut sizes = quotas.map(|q| (q + 1e-9).floor() as usize);
        let assigned: usize = sizes.iter().sum();
        let mut order = [0usize, 1, 2];
        let rem = |i: usize| quotas[i] - sizes[i] as f64;
        order.sort_by(|&a, &b| rem(b).total_cmp(&rem(a)).then(a.cmp(&b)));
        for &i in order.iter().cycle().take(n.saturating_sub(assigned)) {
            sizes[i] += 1;
        }
        // Rounding slack from the epsilon guard can only overshoot by one.
        while sizes.iter().sum::<usize>() > n {
            let i = (0..3).rev().find(|&i| sizes[i] > 0).unwrap();
            sizes[i] -= 1;
        }
        sizes
    }
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train: 0.7,
            dev: 0.1,
            test: 0.2,
            seed: 123,
        }
    }
}

pub struct Splits {
    pub train: Snapshot,
    pub dev: Snapshot,
    pub test: Snapshot,
}

/// Randomly partition documents into train/dev/test. Within each part the
/// original document order is kept.
pub fn split(snapshot: &Snapshot, spec: &SplitSpec) -> Result<Splits> {
    spec.validate()?;
    if snapshot.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let n = snapshot.n_documents();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));

    let [n_train, n_dev, _] = spec.sizes(n);
    let take = |range: std::ops::Range<usize>| {
        let mut docs = order[range].to_vec();
        docs.sort_unstable();
        snapshot.select_documents(docs)
    };
    Ok(Splits {
        train: take(0..n_train),
        dev: take(n_train..n_train + n_dev),
        test: take(n_train + n_dev..n),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Write;

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    fn doc_strings(s: &Snapshot) -> Vec<String> {
        (0..s.n_documents()).map(|d| s.document_text(d)).collect()
    }

    #[test]
    fn tokenizer_lowercases_and_drops_punctuation() {
        assert_eq!(
            tokenize("Don't PANIC, it's fine! Really? Yes."),
            vec![
                vec!["don't", "panic", "it's", "fine"],
                vec!["really"],
                vec!["yes"]
            ]
        );
        // no whitespace after the dot: not a boundary
        assert_eq!(tokenize("version 2.0 works"), vec![vec!["version", "2", "0", "works"]]);
        assert!(tokenize(" ... !!! ").is_empty());
    }

    #[test]
    fn lines_file_yields_a_sentence_per_document_at_least() {
        let f = write_tmp("one two\nthree. four five\n\nsix\n");
        let s = load_snapshot(f.path(), InputFormat::Lines, "2010").unwrap();
        assert_eq!(s.n_documents(), 3);
        assert_eq!(s.n_sentences(), 4);
        assert_eq!(s.label(), "2010");
    }

    #[test]
    fn empty_file_is_an_error() {
        let f = write_tmp("");
        let err = load_snapshot(f.path(), InputFormat::Lines, "x").unwrap_err();
        assert_eq!(err.to_string(), "empty corpus");
    }

    #[test]
    fn records_file_with_ten_tokens() {
        let f = write_tmp("{\"text\": \"a b c d e f g h i j\", \"timestamp\": 2010}\n");
        let s = load_snapshot(f.path(), InputFormat::Records, "2010").unwrap();
        assert_eq!(s.n_sentences(), 1);
        let words: Vec<&str> = s.sentence_words(0).collect();
        assert_eq!(words, "a b c d e f g h i j".split(' ').collect::<Vec<_>>());
    }

    #[test]
    fn malformed_record_reports_line() {
        let f = write_tmp("{\"text\": \"ok\"}\n{\"txt\": 1}\n");
        match load_snapshot(f.path(), InputFormat::Records, "x").unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unreadable_file_is_an_io_error() {
        let err = load_snapshot(Path::new("/nonexistent/c1.txt"), InputFormat::Lines, "x");
        assert!(matches!(err, Err(Error::Io { .. })));
    }

    #[test]
    fn preprocess_dedups_and_filters_short() {
        let ten = "a b c d e f g h i j";
        let nine = "a b c d e f g h i";
        let s = Snapshot::from_documents("t", &[ten, ten, nine]);
        let p = preprocess(&s, 10).unwrap();
        assert_eq!(p.n_documents(), 1);
        assert_eq!(p.vocab().len(), 10);
    }

    #[test]
    fn preprocess_counts_match_set_filter_oracle() {
        // 70 distinct long docs, 20 duplicates of them, 10 distinct short docs.
        let mut docs: Vec<String> = (0..70)
            .map(|i| format!("doc{i} w1 w2 w3 w4 w5 w6 w7 w8 w9 w10"))
            .collect();
        let dups: Vec<String> = (0..20).map(|i| docs[i * 3].clone()).collect();
        docs.extend(dups);
        docs.extend((0..10).map(|i| format!("short{i} a b")));
        assert_eq!(docs.len(), 100);

        let mut seen = HashSet::new();
        let expected = docs
            .iter()
            .filter(|d| d.split_whitespace().count() >= 10 && seen.insert(d.to_string()))
            .count();
        assert_eq!(expected, 70);

        let s = Snapshot::from_documents("t", &docs);
        assert_eq!(preprocess(&s, 10).unwrap().n_documents(), expected);
    }

    #[test]
    fn preprocess_everything_filtered_is_an_error() {
        let s = Snapshot::from_documents("t", &["too short"]);
        assert_eq!(
            preprocess(&s, 10).unwrap_err().to_string(),
            "empty corpus after preprocessing"
        );
        assert!(preprocess(&s, 0).is_err());
    }

    #[test]
    fn split_sizes_and_determinism() {
        let docs: Vec<String> = (0..10).map(|i| format!("doc{i}")).collect();
        let s = Snapshot::from_documents("t", &docs);
        let spec = SplitSpec::new(0.7, 0.1, 0.2, 123).unwrap();
        let a = split(&s, &spec).unwrap();
        let b = split(&s, &spec).unwrap();
        assert_eq!(
            [a.train.n_documents(), a.dev.n_documents(), a.test.n_documents()],
            [7, 1, 2]
        );
        assert_eq!(doc_strings(&a.train), doc_strings(&b.train));
        assert_eq!(doc_strings(&a.dev), doc_strings(&b.dev));
        assert_eq!(doc_strings(&a.test), doc_strings(&b.test));
    }

    #[test]
    fn split_single_document_goes_to_train() {
        // Quotas 0.7 / 0.1 / 0.2 all floor to zero; the largest remainder is train's.
        let spec = SplitSpec::default();
        assert_eq!(spec.sizes(1), [1, 0, 0]);
        let s = Snapshot::from_documents("t", &["only"]);
        let parts = split(&s, &spec).unwrap();
        assert_eq!(parts.train.n_documents(), 1);
        assert!(parts.dev.is_empty() && parts.test.is_empty());
    }

    #[test]
    fn split_rejects_bad_fractions() {
        assert!(SplitSpec::new(0.5, 0.5, 0.5, 1).is_err());
        assert!(SplitSpec::new(1.2, -0.1, -0.1, 1).is_err());
        let s = Snapshot::from_documents("t", &["x"]);
        let bad = SplitSpec {
            train: 0.9,
            dev: 0.0,
            test: 0.0,
            seed: 0,
        };
        assert!(matches!(split(&s, &bad), Err(Error::InvalidSplit(_))));
    }

    fn arb_text() -> impl Strategy<Value = String> {
        proptest::string::string_regex("[a-zA-Z0-9' ,.!?\u{e9}\u{c9}-]{0,60}").unwrap()
    }

    proptest! {
        #[test]
        fn tokenization_is_idempotent(text in arb_text()) {
            for sentence in tokenize(&text) {
                let rejoined = sentence.join(" ");
                prop_assert_eq!(tokenize(&rejoined), vec![sentence.clone()]);
            }
        }

        #[test]
        fn snapshot_invariants(docs in proptest::collection::vec(arb_text(), 0..12)) {
            let s = Snapshot::from_documents("t", &docs);
            prop_assert_eq!(s.n_sentences(), s.sentences().len());
            for sentence in s.sentences() {
                prop_assert!(!sentence.is_empty());
                for &id in sentence {
                    prop_assert_eq!(s.vocab().id(s.vocab().word(id)), Some(id));
                }
            }
            // rendered documents tokenize back to the same sentences
            for d in 0..s.n_documents() {
                let again = Snapshot::from_documents("t", &[s.document_text(d)]);
                prop_assert_eq!(again.n_sentences(), s.document(d).len());
            }
        }

        #[test]
        fn preprocess_is_idempotent(
            docs in proptest::collection::vec(
                proptest::sample::select(vec!["a b c", "a b c d", "x y", "a b c", "p q r s t"]),
                1..20),
            min_words in 1usize..5,
        ) {
            let s = Snapshot::from_documents("t", &docs);
            if let Ok(once) = preprocess(&s, min_words) {
                let twice = preprocess(&once, min_words).unwrap();
                prop_assert_eq!(once, twice);
            }
        }

        #[test]
        fn split_partitions_documents(n in 1usize..60, seed in any::<u64>(),
                                      a in 0u32..=10, b in 0u32..=10) {
            prop_assume!(a + b <= 10);
            let spec = SplitSpec::new(a as f64 / 10.0, b as f64 / 10.0,
                                      (10 - a - b) as f64 / 10.0, seed).unwrap();
            let docs: Vec<String> = (0..n).map(|i| format!("doc{i}")).collect();
            let s = Snapshot::from_documents("t", &docs);
            let parts = split(&s, &spec).unwrap();
            let sizes = [parts.train.n_documents(), parts.dev.n_documents(), parts.test.n_documents()];
            prop_assert_eq!(sizes.iter().sum::<usize>(), n);
            for (size, frac) in sizes.iter().zip([spec.train, spec.dev, spec.test]) {
                prop_assert!((*size as f64 - frac * n as f64).abs() <= 1.0);
            }
            let mut all: Vec<String> = doc_strings(&parts.train);
            all.extend(doc_strings(&parts.dev));
            all.extend(doc_strings(&parts.test));
            all.sort();
            let mut expected = docs.clone();
            expected.sort();
            prop_assert_eq!(all, expected);
        }
    }
}
