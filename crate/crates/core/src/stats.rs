//! Sentence-level frequency and co-occurrence counting, PMI and the pivot score.
//!
//! Every count here uses set semantics within a sentence: a token that occurs
//! twice in a sentence contributes once to `f`, and a pair contributes once to
//! `cooc`. Self pairs are never stored.

use std::collections::HashMap;
use std::io::{self, Write};

use rayon::prelude::*;

use crate::corpus::{Snapshot, TokenId, Vocab};
use crate::error::{Error, Result};

const PARTITION_SENTENCES: usize = 4096;

/// Number of sentences containing each token.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrequencyTable {
    counts: Vec<u32>,
    n_sentences: usize,
}

impl FrequencyTable {
    pub fn get(&self, id: TokenId) -> u32 {
        self.counts.get(id as usize).copied().unwrap_or(0)
    }

    pub fn n_sentences(&self) -> usize {
        self.n_sentences
    }

    pub fn iter(&self) -> impl Iterator<Item = (TokenId, u32)> + '_ {
        self.counts
            .iter()
            .enumerate()
            .filter(|(_, &c)| c > 0)
            .map(|(i, &c)| (i as TokenId, c))
    }
}

/// Symmetric sparse co-occurrence counts. Each row is sorted by neighbour id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CoocTable {
    rows: Vec<Vec<(TokenId, u32)>>,
}

impl CoocTable {
    pub fn get(&self, a: TokenId, b: TokenId) -> u32 {
        let Some(row) = self.rows.get(a as usize) else {
            return 0;
        };
        match row.binary_search_by_key(&b, |&(id, _)| id) {
            Ok(i) => row[i].1,
            Err(_) => 0,
        }
    }

    /// All tokens co-occurring with `a`, with their counts.
    pub fn neighbors(&self, a: TokenId) -> &[(TokenId, u32)] {
        self.rows.get(a as usize).map_or(&[], Vec::as_slice)
    }

    /// Number of stored unordered pairs.
    pub fn n_pairs(&self) -> usize {
        self.rows.iter().map(Vec::len).sum::<usize>() / 2
    }
}

/// Counts accumulated over one partition of sentences. Merging is associative
/// and commutative, so any partitioning gives the same final tables.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PartialCounts {
    freq: Vec<u32>,
    pairs: HashMap<(TokenId, TokenId), u32>,
    n_sentences: usize,
}

impl PartialCounts {
    pub fn from_sentences(sentences: &[Vec<TokenId>]) -> Self {
        let mut out = PartialCounts::default();
        let mut uniq: Vec<TokenId> = Vec::new();
        for sentence in sentences {
            uniq.clear();
            uniq.extend_from_slice(sentence);
            uniq.sort_unstable();
            uniq.dedup();
            for (i, &a) in uniq.iter().enumerate() {
                if out.freq.len() <= a as usize {
                    out.freq.resize(a as usize + 1, 0);
                }
                out.freq[a as usize] += 1;
                for &b in &uniq[i + 1..] {
                    *out.pairs.entry((a, b)).or_insert(0) += 1;
                }
            }
            out.n_sentences += 1;
        }
        out
    }

    pub fn merge(mut self, other: PartialCounts) -> PartialCounts {
        if self.freq.len() < other.freq.len() {
            self.freq.resize(other.freq.len(), 0);
        }
        for (i, c) in other.freq.into_iter().enumerate() {
            self.freq[i] += c;
        }
        // fold the smaller map into the larger one
        let (mut big, small) = if self.pairs.len() >= other.pairs.len() {
            (std::mem::take(&mut self.pairs), other.pairs)
        } else {
            (other.pairs, std::mem::take(&mut self.pairs))
        };
        for (k, c) in small {
            *big.entry(k).or_insert(0) += c;
        }
        self.pairs = big;
        self.n_sentences += other.n_sentences;
        self
    }

    fn finish(self, vocab_len: usize) -> (FrequencyTable, CoocTable) {
        let mut counts = self.freq;
        counts.resize(vocab_len.max(counts.len()), 0);
        let mut rows: Vec<Vec<(TokenId, u32)>> = vec![Vec::new(); counts.len()];
        for ((a, b), c) in self.pairs {
            rows[a as usize].push((b, c));
            rows[b as usize].push((a, c));
        }
        rows.par_iter_mut().for_each(|r| r.sort_unstable());
        (
            FrequencyTable {
                counts,
                n_sentences: self.n_sentences,
            },
            CoocTable { rows },
        )
    }
}

/// Frequency and co-occurrence tables of one snapshot, with its vocabulary.
#[derive(Clone, Debug)]
pub struct SnapshotStats {
    label: String,
    vocab: Vocab,
    freq: FrequencyTable,
    cooc: CoocTable,
}

/// Count sentence frequencies and co-occurrences, in parallel over partitions.
pub fn count(snapshot: &Snapshot) -> Result<SnapshotStats> {
    if snapshot.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let partial = snapshot
        .sentences()
        .par_chunks(PARTITION_SENTENCES)
        .map(PartialCounts::from_sentences)
        .reduce(PartialCounts::default, PartialCounts::merge);
    let (freq, cooc) = partial.finish(snapshot.vocab().len());
    Ok(SnapshotStats {
        label: snapshot.label().to_owned(),
        vocab: snapshot.vocab().clone(),
        freq,
        cooc,
    })
}

impl SnapshotStats {
    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn freq(&self) -> &FrequencyTable {
        &self.freq
    }

    pub fn cooc(&self) -> &CoocTable {
        &self.cooc
    }

    pub fn n_sentences(&self) -> usize {
        self.freq.n_sentences
    }

    /// Sentence frequency of `word`; 0 when absent from the snapshot.
    pub fn frequency(&self, word: &str) -> u32 {
        self.vocab.id(word).map_or(0, |id| self.freq.get(id))
    }

    pub fn cooccurrence(&self, a: &str, b: &str) -> u32 {
        match (self.vocab.id(a), self.vocab.id(b)) {
            (Some(a), Some(b)) if a != b => self.cooc.get(a, b),
            _ => 0,
        }
    }

    pub fn pmi(&self, w: TokenId, x: TokenId) -> Option<f64> {
        if w == x {
            return None;
        }
        pmi_from_counts(
            self.cooc.get(w, x),
            self.freq.get(w),
            self.freq.get(x),
            self.freq.n_sentences,
        )
    }

    /// PMI by surface form; `None` when either word is absent or they never
    /// co-occur.
    pub fn pmi_words(&self, w: &str, x: &str) -> Option<f64> {
        self.pmi(self.vocab.id(w)?, self.vocab.id(x)?)
    }

    /// `token<TAB>count`, sorted by token.
    pub fn write_frequencies(&self, mut out: impl Write) -> io::Result<()> {
        let mut rows: Vec<(&str, u32)> = self
            .freq
            .iter()
            .map(|(id, c)| (self.vocab.word(id), c))
            .collect();
        rows.sort_unstable();
        for (token, c) in rows {
            writeln!(out, "{token}\t{c}")?;
        }
        Ok(())
    }

    /// `tokenA<TAB>tokenB<TAB>count` with `tokenA < tokenB`, sorted.
    pub fn write_cooccurrences(&self, mut out: impl Write) -> io::Result<()> {
        let mut rows: Vec<(&str, &str, u32)> = Vec::with_capacity(self.cooc.n_pairs());
        for (a, row) in self.cooc.rows.iter().enumerate() {
            let wa = self.vocab.word(a as TokenId);
            for &(b, c) in row {
                let wb = self.vocab.word(b);
                if wa < wb {
                    rows.push((wa, wb, c));
                }
            }
        }
        rows.sort_unstable();
        for (a, b, c) in rows {
            writeln!(out, "{a}\t{b}\t{c}")?;
        }
        Ok(())
    }
}

/// Natural-log PMI from sentence counts. `None` when the pair never
/// co-occurs or a marginal is zero.
pub fn pmi_from_counts(cooc: u32, f_w: u32, f_x: u32, n_sentences: usize) -> Option<f64> {
    if cooc == 0 || f_w == 0 || f_x == 0 || n_sentences == 0 {
        return None;
    }
    let n = n_sentences as f64;
    let joint = cooc as f64 / n;
    let pw = f_w as f64 / n;
    let px = f_x as f64 / n;
    Some((joint / (pw * px)).ln())
}

/// Suitability of `word` as a pivot: its smaller sentence frequency across
/// the two snapshots.
pub fn pivot_score(word: &str, s1: &SnapshotStats, s2: &SnapshotStats) -> u32 {
    s1.frequency(word).min(s2.frequency(word))
}
