//! Synthetic corpora with a known semantic shift.
//!
//! In the planted pair, `mask` co-occurs only with `hide` in the first
//! snapshot and only with `vaccine` in the second. Both snapshots also share
//! 200 identical distractor sentences over a 100-word vocabulary, arranged so
//! that every distractor word occurs in exactly 10 sentences and always next
//! to the same four neighbours. Distractor words therefore have pivot score
//! 10 and identical anchor sets in both snapshots, while `mask` has pivot
//! score 20 and disjoint anchor sets.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use crate::embeddings::EmbeddingTable;

pub const SHIFT_SENTENCES: usize = 20;
pub const DISTRACTOR_SENTENCES: usize = 200;
const DISTRACTOR_VOCAB: usize = 100;
const DISTRACTOR_LEN: usize = 5;

pub struct PlantedShift {
    pub t1: &'static str,
    pub t2: &'static str,
    pub c1: Vec<String>,
    pub c2: Vec<String>,
}

fn distractor(i: usize) -> String {
    (0..DISTRACTOR_LEN)
        .map(|j| format!("d{:03}", (i * DISTRACTOR_LEN + j) % DISTRACTOR_VOCAB))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Documents of one snapshot. Each document carries a unique `docN` token so
/// that no two documents are duplicates, and has at least 10 words.
fn documents(anchor: &str) -> Vec<String> {
    let mut sentences = (0..DISTRACTOR_SENTENCES).map(distractor);
    let mut docs = Vec::new();
    let mut id = 0;
    let next_pair = |id: usize, sentences: &mut dyn Iterator<Item = String>| {
        let a = sentences.next().unwrap();
        let b = sentences.next().unwrap();
        format!("{a}. {b} doc{id}.")
    };
    for _ in 0..SHIFT_SENTENCES {
        docs.push(format!("Mask {anchor}. {}", next_pair(id, &mut sentences)));
        id += 1;
    }
    while id < (DISTRACTOR_SENTENCES / 2) {
        docs.push(next_pair(id, &mut sentences));
        id += 1;
    }
    docs
}

pub fn planted_shift() -> PlantedShift {
    PlantedShift {
        t1: "2010",
        t2: "2020",
        c1: documents("hide"),
        c2: documents("vaccine"),
    }
}

impl PlantedShift {
    /// Write both snapshots as one-document-per-line files under `dir`.
    pub fn write(&self, dir: &Path) -> io::Result<(PathBuf, PathBuf)> {
        let p1 = dir.join("c1.txt");
        let p2 = dir.join("c2.txt");
        fs::write(&p1, self.c1.join("\n") + "\n")?;
        fs::write(&p2, self.c2.join("\n") + "\n")?;
        Ok((p1, p2))
    }

    /// Hand-made tables where `mask` and `hide` share a direction in the first
    /// snapshot, `mask` and `vaccine` share an orthogonal one in the second,
    /// and each anchor is absent from the other snapshot.
    pub fn orthogonal_embeddings(&self) -> (EmbeddingTable, EmbeddingTable) {
        let e1 = vec![1.0, 0.0, 0.0];
        let e2 = vec![0.0, 1.0, 0.0];
        let t1 = EmbeddingTable::from_vectors(self.t1, 3, [("mask", e1.clone()), ("hide", e1)])
            .expect("fixture vectors are well-formed");
        let t2 = EmbeddingTable::from_vectors(self.t2, 3, [("mask", e2.clone()), ("vaccine", e2)])
            .expect("fixture vectors are well-formed");
        (t1, t2)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{preprocess, Snapshot};
    use crate::stats::count;

    #[test]
    fn fixture_shape() {
        let f = planted_shift();
        let c1 = Snapshot::from_documents(f.t1, &f.c1);
        assert_eq!(c1.n_documents(), 100);
        assert_eq!(c1.n_sentences(), SHIFT_SENTENCES + DISTRACTOR_SENTENCES);
        // survives the default preprocessing untouched
        assert_eq!(preprocess(&c1, 10).unwrap(), c1);

        let st = count(&c1).unwrap();
        assert_eq!(st.frequency("mask"), 20);
        assert_eq!(st.cooccurrence("mask", "hide"), 20);
        assert_eq!(st.frequency("vaccine"), 0);
        for i in 0..DISTRACTOR_VOCAB {
            assert_eq!(st.frequency(&format!("d{i:03}")), 10);
        }
    }
}
