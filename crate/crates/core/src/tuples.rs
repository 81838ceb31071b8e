//! Pivot selection, anchor sets, and the three tuple scorers.
//!
//! A tuple `(w, u, v)` pairs a pivot `w` seen in both snapshots with an anchor
//! `u` strongly associated with it in the first snapshot and an anchor `v`
//! strongly associated with it in the second.
//!
//! - frequency: pivots ranked by min cross-snapshot sentence frequency, all
//!   anchor pairs expanded in rank order;
//! - diversity: the same pivots re-ranked by `1 - Jaccard(U, V)`;
//! - context: candidate tuples re-scored with averaged contextual embeddings.

use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io::{self, BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;

use crate::embeddings::{cosine, EmbeddingTable};
use crate::error::{Error, Result};
use crate::stats::{pivot_score, SnapshotStats};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Freq,
    Div,
    Cont,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Freq => "freq",
            Method::Div => "div",
            Method::Cont => "cont",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "freq" => Ok(Method::Freq),
            "div" => Ok(Method::Div),
            "cont" => Ok(Method::Cont),
            other => Err(Error::InvalidArgument(format!(
                "unknown method {other:?}, expected freq, div or cont"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pivot {
    pub word: String,
    pub score: u32,
}

/// Top `top_k` words by pivot score, descending, ties broken
/// lexicographically. Words with score 0 are never returned.
pub fn select_pivots(s1: &SnapshotStats, s2: &SnapshotStats, top_k: usize) -> Vec<Pivot> {
    let mut pivots: Vec<Pivot> = s1
        .vocab()
        .iter()
        .map(|(_, w)| Pivot {
            word: w.to_owned(),
            score: pivot_score(w, s1, s2),
        })
        .filter(|p| p.score > 0)
        .collect();
    pivots.sort_unstable_by(|a, b| b.score.cmp(&a.score).then_with(|| a.word.cmp(&b.word)));
    pivots.truncate(top_k);
    pivots
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AnchorConfig {
    /// Anchors kept per side.
    pub m: usize,
    /// Minimum sentence frequency of an anchor in its own snapshot.
    pub min_freq: u32,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        AnchorConfig { m: 10, min_freq: 5 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Anchor {
    pub word: String,
    pub pmi: f64,
}

/// The anchors of one pivot in each snapshot, sorted by PMI descending.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorSet {
    pub pivot: String,
    pub t1: Vec<Anchor>,
    pub t2: Vec<Anchor>,
    pub m: usize,
}

fn top_anchors(pivot: &str, stats: &SnapshotStats, cfg: &AnchorConfig) -> Vec<Anchor> {
    let Some(w) = stats.vocab().id(pivot) else {
        return Vec::new();
    };
    if cfg.m == 0 {
        return Vec::new();
    }
    let mut anchors: Vec<Anchor> = stats
        .cooc()
        .neighbors(w)
        .iter()
        .filter(|&&(x, _)| stats.freq().get(x) >= cfg.min_freq)
        .filter_map(|&(x, _)| {
            stats.pmi(w, x).map(|pmi| Anchor {
                word: stats.vocab().word(x).to_owned(),
                pmi,
            })
        })
        .collect();
    anchors.sort_unstable_by(|a, b| b.pmi.total_cmp(&a.pmi).then_with(|| a.word.cmp(&b.word)));
    anchors.truncate(cfg.m);
    anchors
}

pub fn build_anchor_set(
    pivot: &str,
    s1: &SnapshotStats,
    s2: &SnapshotStats,
    cfg: &AnchorConfig,
) -> AnchorSet {
    AnchorSet {
        pivot: pivot.to_owned(),
        t1: top_anchors(pivot, s1, cfg),
        t2: top_anchors(pivot, s2, cfg),
        m: cfg.m,
    }
}

/// Anchor sets for each pivot, in pivot order.
pub fn build_anchor_sets(
    pivots: &[Pivot],
    s1: &SnapshotStats,
    s2: &SnapshotStats,
    cfg: &AnchorConfig,
) -> Vec<AnchorSet> {
    pivots
        .par_iter()
        .map(|p| build_anchor_set(&p.word, s1, s2, cfg))
        .collect()
}

/// `1 - |U ∩ V| / |U ∪ V|` over anchor tokens.
pub fn diversity(set: &AnchorSet) -> Result<f64> {
    let u: HashSet<&str> = set.t1.iter().map(|a| a.word.as_str()).collect();
    let v: HashSet<&str> = set.t2.iter().map(|a| a.word.as_str()).collect();
    let union = u.union(&v).count();
    if union == 0 {
        return Err(Error::DiversityUndefined);
    }
    let inter = u.intersection(&v).count();
    Ok(1.0 - inter as f64 / union as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredTuple {
    pub w: String,
    pub u: String,
    pub v: String,
    pub score: f64,
    pub method: Method,
}

/// Tuples of one method in descending score order.
#[derive(Clone, Debug, PartialEq)]
pub struct TupleSet {
    pub method: Method,
    pub k: usize,
    pub tuples: Vec<ScoredTuple>,
}

impl TupleSet {
    pub fn len(&self) -> usize {
        self.tuples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tuples.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, ScoredTuple> {
        self.tuples.iter()
    }
}

/// Cross product of a pivot's anchors, `u` outer and `v` inner. Pairs with
/// `u == v` are skipped so that every tuple has three distinct tokens.
fn expand(set: &AnchorSet, score: f64, method: Method) -> impl Iterator<Item = ScoredTuple> + '_ {
    set.t1.iter().flat_map(move |u| {
        set.t2
            .iter()
            .filter(move |v| v.word != u.word && v.word != set.pivot && u.word != set.pivot)
            .map(move |v| ScoredTuple {
                w: set.pivot.clone(),
                u: u.word.clone(),
                v: v.word.clone(),
                score,
                method,
            })
    })
}

fn index_sets(anchor_sets: &[AnchorSet]) -> HashMap<&str, &AnchorSet> {
    anchor_sets.iter().map(|s| (s.pivot.as_str(), s)).collect()
}

pub fn build_freq_tuples(pivots: &[Pivot], anchor_sets: &[AnchorSet], k: usize) -> TupleSet {
    let sets = index_sets(anchor_sets);
    let tuples = pivots
        .iter()
        .filter_map(|p| sets.get(p.word.as_str()).map(|s| (p, *s)))
        .flat_map(|(p, s)| expand(s, f64::from(p.score), Method::Freq))
        .take(k)
        .collect();
    TupleSet {
        method: Method::Freq,
        k,
        tuples,
    }
}

/// Re-rank frequency-ranked pivots by diversity (ties: higher pivot score,
/// then lexicographic) and expand their anchors. Pivots whose anchor sets are
/// both empty have no diversity and are dropped.
pub fn build_div_tuples(pivots_by_freq: &[Pivot], anchor_sets: &[AnchorSet], k: usize) -> TupleSet {
    let sets = index_sets(anchor_sets);
    let mut ranked: Vec<(&Pivot, &AnchorSet, f64)> = pivots_by_freq
        .iter()
        .filter_map(|p| {
            let set = *sets.get(p.word.as_str())?;
            diversity(set).ok().map(|d| (p, set, d))
        })
        .collect();
    ranked.sort_by(|a, b| {
        b.2.total_cmp(&a.2)
            .then_with(|| b.0.score.cmp(&a.0.score))
            .then_with(|| a.0.word.cmp(&b.0.word))
    });
    let tuples = ranked
        .into_iter()
        .flat_map(|(_, set, d)| expand(set, d, Method::Div))
        .take(k)
        .collect();
    TupleSet {
        method: Method::Div,
        k,
        tuples,
    }
}

/// `g(w1,u1) + g(w2,v2) - g(w2,u2) - g(w1,v1)` where `g` is cosine and the
/// subscript names the snapshot table the vector comes from. Words missing
/// from a table contribute the zero vector, and cosine against zero is 0.
pub fn context_score(
    w: &str,
    u: &str,
    v: &str,
    emb1: &EmbeddingTable,
    emb2: &EmbeddingTable,
) -> Result<f64> {
    let (w1, u1, v1) = (emb1.vector(w), emb1.vector(u), emb1.vector(v));
    let (w2, u2, v2) = (emb2.vector(w), emb2.vector(u), emb2.vector(v));
    // Grouped as (C1 terms) + (C2 terms) so that swapping anchors or tables
    // negates the result bit-exactly.
    Ok((cosine(w1, u1)? - cosine(w1, v1)?) + (cosine(w2, v2)? - cosine(w2, u2)?))
}

fn by_score_then_tokens(a: &ScoredTuple, b: &ScoredTuple) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| (&a.w, &a.u, &a.v).cmp(&(&b.w, &b.u, &b.v)))
}

pub fn build_cont_tuples(
    candidates: &TupleSet,
    emb1: &EmbeddingTable,
    emb2: &EmbeddingTable,
    k: usize,
) -> Result<TupleSet> {
    if emb1.dim() != emb2.dim() {
        return Err(Error::DimensionMismatch {
            expected: emb1.dim(),
            actual: emb2.dim(),
        });
    }
    let mut tuples = candidates
        .tuples
        .par_iter()
        .map(|t| {
            Ok(ScoredTuple {
                score: context_score(&t.w, &t.u, &t.v, emb1, emb2)?,
                method: Method::Cont,
                ..t.clone()
            })
        })
        .collect::<Result<Vec<_>>>()?;
    tuples.sort_by(by_score_then_tokens);
    tuples.truncate(k);
    Ok(TupleSet {
        method: Method::Cont,
        k,
        tuples,
    })
}

/// `rank<TAB>w<TAB>u<TAB>v<TAB>score<TAB>method`, rank starting at 1, scores
/// with 17 significant digits.
pub fn write_tuples(set: &TupleSet, mut out: impl Write) -> io::Result<()> {
    for (i, t) in set.tuples.iter().enumerate() {
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{:.16e}\t{}",
            i + 1,
            t.w,
            t.u,
            t.v,
            t.score,
            t.method
        )?;
    }
    Ok(())
}

pub fn read_tuples(path: &Path, input: impl BufRead) -> Result<TupleSet> {
    let mut tuples = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.is_empty() {
            continue;
        }
        let bad = |msg: &str| Error::parse(path, i + 1, msg.to_owned());
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 6 {
            return Err(bad("expected 6 tab-separated columns"));
        }
        let rank: usize = cols[0].parse().map_err(|_| bad("bad rank"))?;
        if rank != tuples.len() + 1 {
            return Err(bad("ranks must be consecutive from 1"));
        }
        let score: f64 = cols[4].parse().map_err(|_| bad("bad score"))?;
        if !score.is_finite() {
            return Err(bad("non-finite score"));
        }
        tuples.push(ScoredTuple {
            w: cols[1].to_owned(),
            u: cols[2].to_owned(),
            v: cols[3].to_owned(),
            score,
            method: cols[5].parse().map_err(|_| bad("bad method"))?,
        });
    }
    let method = match tuples.first() {
        Some(t) => t.method,
        None => return Err(Error::parse(path, 1, "empty tuple file")),
    };
    if tuples.iter().any(|t| t.method != method) {
        return Err(Error::parse(path, 1, "mixed methods in one tuple file"));
    }
    Ok(TupleSet {
        method,
        k: tuples.len(),
        tuples,
    })
}
