//! Templates: literal text interleaved with typed slots.
//!
//! Manual templates are written by hand with `<w> <u> <v> <T1> <T2>`
//! placeholders (`⟨w⟩` style brackets are accepted too). Automatic templates
//! are induced by beam search over the frame
//!
//! ```text
//! S1 <Z1> u <Z2> T1 <Z3> v <Z4> T2 S2
//! ```
//!
//! where `S1`/`S2` are corpus sentences containing `u`/`v`, and the literal runs
//! `Z1..Z4` are decoded left to right. A run is extended token by token with
//! candidates from the oracle vocabulary, and closes when the oracle prefers
//! the next fixed token of the frame over every vocabulary continuation
//! (summed over all tuples), or when it reaches `max_slot_len`. The objective
//! is the log-likelihood of the run tokens summed over all tuples.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io::{self, BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;

use crate::corpus::{tokenize_words, Snapshot};
use crate::error::{Error, Result};
use crate::lm_oracle::LikelihoodOracle;
use crate::tuples::{ScoredTuple, TupleSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SlotKind {
    W,
    U,
    V,
    T1,
    T2,
}

impl SlotKind {
    pub fn placeholder(self) -> &'static str {
        match self {
            SlotKind::W => "<w>",
            SlotKind::U => "<u>",
            SlotKind::V => "<v>",
            SlotKind::T1 => "<T1>",
            SlotKind::T2 => "<T2>",
        }
    }
}

impl FromStr for SlotKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "w" => Ok(SlotKind::W),
            "u" => Ok(SlotKind::U),
            "v" => Ok(SlotKind::V),
            "t1" => Ok(SlotKind::T1),
            "t2" => Ok(SlotKind::T2),
            _ => Err(Error::Template(format!("unknown placeholder <{s}>"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Piece {
    Literal(String),
    Slot(SlotKind),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Element {
    pub piece: Piece,
    /// Whether a space separates this element from the previous one.
    pub space_before: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Origin {
    Manual,
    Auto,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Template {
    pub elements: Vec<Element>,
    pub origin: Origin,
    pub loglik: Option<f64>,
}

/// Slot order of the induced-template frame.
const FRAME: [SlotKind; 4] = [SlotKind::U, SlotKind::T1, SlotKind::V, SlotKind::T2];

fn placeholder_at(s: &str) -> Option<(&str, usize)> {
    let (open, close) = if s.starts_with('<') {
        ('<', '>')
    } else if s.starts_with('⟨') {
        ('⟨', '⟩')
    } else {
        return None;
    };
    let body = &s[open.len_utf8()..];
    let end = body.find(close)?;
    let name = &body[..end];
    if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
        return None;
    }
    Some((name, open.len_utf8() + end + close.len_utf8()))
}

/// Parse template text. Whitespace separates elements; a placeholder glued to
/// neighbouring text (as in `<T1>,`) stays glued when filled.
pub fn parse_template(text: &str) -> Result<Template> {
    let mut elements: Vec<Element> = Vec::new();
    let mut seen = HashSet::new();
    for chunk in text.split_whitespace() {
        let mut rest = chunk;
        let mut first = true;
        let mut literal = String::new();
        let flush = |literal: &mut String, first: &mut bool, elements: &mut Vec<Element>| {
            if !literal.is_empty() {
                elements.push(Element {
                    piece: Piece::Literal(std::mem::take(literal)),
                    space_before: *first,
                });
                *first = false;
            }
        };
        while let Some(c) = rest.chars().next() {
            if let Some((name, len)) = placeholder_at(rest) {
                let kind: SlotKind = name.parse()?;
                if !seen.insert(kind) {
                    return Err(Error::Template(format!(
                        "placeholder {} appears more than once",
                        kind.placeholder()
                    )));
                }
                flush(&mut literal, &mut first, &mut elements);
                elements.push(Element {
                    piece: Piece::Slot(kind),
                    space_before: first,
                });
                first = false;
                rest = &rest[len..];
            } else {
                literal.push(c);
                rest = &rest[c.len_utf8()..];
            }
        }
        flush(&mut literal, &mut first, &mut elements);
    }
    if seen.is_empty() {
        log::warn!("template {text:?} has no placeholders");
    }
    Ok(Template {
        elements,
        origin: Origin::Manual,
        loglik: None,
    })
}

impl Template {
    pub fn slots(&self) -> impl Iterator<Item = SlotKind> + '_ {
        self.elements.iter().filter_map(|e| match e.piece {
            Piece::Slot(k) => Some(k),
            Piece::Literal(_) => None,
        })
    }

    pub fn has_slot(&self, kind: SlotKind) -> bool {
        self.slots().any(|k| k == kind)
    }

    /// Build an automatic template from the four decoded literal runs.
    pub fn from_runs(runs: &[Vec<String>; 4], loglik: f64) -> Self {
        let mut elements = Vec::new();
        for (run, slot) in runs.iter().zip(FRAME) {
            for tok in run {
                elements.push(Element {
                    piece: Piece::Literal(tok.clone()),
                    space_before: true,
                });
            }
            elements.push(Element {
                piece: Piece::Slot(slot),
                space_before: true,
            });
        }
        Template {
            elements,
            origin: Origin::Auto,
            loglik: Some(loglik),
        }
    }

    /// The literal runs before `u`, `T1`, `v` and `T2`, tokenized with the
    /// corpus tokenizer. Fails unless the slots are exactly `U, T1, V, T2` in
    /// that order with nothing after `T2`.
    pub fn frame_runs(&self) -> Result<[Vec<String>; 4]> {
        let mut runs: [Vec<String>; 4] = Default::default();
        let mut slot = 0;
        for e in &self.elements {
            match &e.piece {
                Piece::Literal(text) => {
                    if slot == 4 {
                        return Err(Error::Template(format!(
                            "template {self} has text after <T2>"
                        )));
                    }
                    runs[slot].extend(tokenize_words(text));
                }
                Piece::Slot(k) => {
                    if slot == 4 || *k != FRAME[slot] {
                        return Err(Error::Template(format!(
                            "template {self} does not follow the <u> <T1> <v> <T2> frame"
                        )));
                    }
                    slot += 1;
                }
            }
        }
        if slot != 4 {
            return Err(Error::Template(format!(
                "template {self} does not follow the <u> <T1> <v> <T2> frame"
            )));
        }
        Ok(runs)
    }

    fn render(&self, mut value: impl FnMut(SlotKind) -> Result<String>) -> Result<String> {
        let mut out = String::new();
        for (i, e) in self.elements.iter().enumerate() {
            if i > 0 && e.space_before {
                out.push(' ');
            }
            match &e.piece {
                Piece::Literal(t) => out.push_str(t),
                Piece::Slot(k) => out.push_str(&value(*k)?),
            }
        }
        Ok(out)
    }

    /// Lowercased, whitespace-insensitive form used to drop near duplicates.
    fn normalized(&self) -> String {
        self.to_string()
            .to_lowercase()
            .split_whitespace()
            .collect::<Vec<_>>()
            .join(" ")
    }
}

impl fmt::Display for Template {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = self
            .render(|k| Ok(k.placeholder().to_owned()))
            .map_err(|_| fmt::Error)?;
        f.write_str(&s)
    }
}

/// Substitute a tuple and timestamp labels into `template`.
pub fn fill(template: &Template, tuple: &ScoredTuple, t1: &str, t2: &str) -> Result<String> {
    template.render(|k| {
        let v = match k {
            SlotKind::W => &tuple.w,
            SlotKind::U => &tuple.u,
            SlotKind::V => &tuple.v,
            SlotKind::T1 => t1,
            SlotKind::T2 => t2,
        };
        if v.is_empty() {
            Err(Error::UnresolvableSlot(k.placeholder().to_owned()))
        } else {
            Ok(v.to_owned())
        }
    })
}

/// One template per line; automatic templates carry `<TAB>loglik`.
pub fn write_templates(templates: &[Template], mut out: impl Write) -> io::Result<()> {
    for t in templates {
        match t.loglik {
            Some(ll) => writeln!(out, "{t}\t{ll:.16e}")?,
            None => writeln!(out, "{t}")?,
        }
    }
    Ok(())
}

pub fn read_templates(path: &Path, input: impl BufRead) -> Result<Vec<Template>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (text, loglik) = match line.split_once('\t') {
            Some((text, ll)) => {
                let ll: f64 = ll
                    .trim()
                    .parse()
                    .map_err(|_| Error::parse(path, i + 1, format!("bad loglik {ll:?}")))?;
                (text, Some(ll))
            }
            None => (line.as_str(), None),
        };
        let mut t = parse_template(text).map_err(|e| Error::parse(path, i + 1, e.to_string()))?;
        if loglik.is_some() {
            t.origin = Origin::Auto;
            t.loglik = loglik;
        }
        out.push(t);
    }
    Ok(out)
}

/// The two corpus sentences conditioning the frame of one tuple.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContextPair {
    pub s1: Vec<String>,
    pub s2: Vec<String>,
}

/// For each word, the shortest sentence containing it (ties: smallest text).
fn shortest_sentences(snapshot: &Snapshot, words: &HashSet<&str>) -> HashMap<String, Vec<String>> {
    let mut best: HashMap<String, Vec<String>> = HashMap::new();
    for s in 0..snapshot.n_sentences() {
        let sentence: Vec<&str> = snapshot.sentence_words(s).collect();
        for w in sentence.iter().filter(|w| words.contains(*w)) {
            let better = match best.get(*w) {
                None => true,
                Some(cur) => {
                    sentence.len() < cur.len() || (sentence.len() == cur.len() && sentence < cur.iter().map(String::as_str).collect::<Vec<_>>())
                }
            };
            if better {
                best.insert((*w).to_owned(), sentence.iter().map(|t| (*t).to_owned()).collect());
            }
        }
    }
    best
}

/// Pick `S1 ∈ c1` containing `u` and `S2 ∈ c2` containing `v` for each tuple.
pub fn select_context_pairs(tuples: &TupleSet, c1: &Snapshot, c2: &Snapshot) -> Result<Vec<ContextPair>> {
    let us: HashSet<&str> = tuples.iter().map(|t| t.u.as_str()).collect();
    let vs: HashSet<&str> = tuples.iter().map(|t| t.v.as_str()).collect();
    let b1 = shortest_sentences(c1, &us);
    let b2 = shortest_sentences(c2, &vs);
    tuples
        .iter()
        .map(|t| {
            let s1 = b1.get(&t.u).ok_or_else(|| {
                Error::InvalidArgument(format!("no sentence of {} contains {:?}", c1.label(), t.u))
            })?;
            let s2 = b2.get(&t.v).ok_or_else(|| {
                Error::InvalidArgument(format!("no sentence of {} contains {:?}", c2.label(), t.v))
            })?;
            Ok(ContextPair {
                s1: s1.clone(),
                s2: s2.clone(),
            })
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct SearchConfig {
    pub beam_width: usize,
    pub max_slot_len: usize,
    pub top_n: usize,
    /// Candidate slot tokens. Defaults to the oracle's vocabulary.
    pub vocabulary: Option<Vec<String>>,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            beam_width: 100,
            max_slot_len: 5,
            top_n: 10,
            vocabulary: None,
        }
    }
}

/// A partially decoded template.
#[derive(Clone, Debug, PartialEq)]
pub struct SearchState {
    pub runs: [Vec<String>; 4],
    /// Index of the run being decoded; 4 once all runs are closed.
    pub current: usize,
    pub loglik: f64,
}

/// Fixed material of the frame for one tuple.
struct Frame {
    s1: Vec<String>,
    /// Tokens following each run: `u`, `T1`, `v`, `T2`.
    anchors: [Vec<String>; 4],
}

impl Frame {
    fn new(tuple: &ScoredTuple, pair: &ContextPair, t1: &[String], t2: &[String]) -> Self {
        Frame {
            s1: pair.s1.clone(),
            anchors: [
                vec![tuple.u.clone()],
                t1.to_vec(),
                vec![tuple.v.clone()],
                t2.to_vec(),
            ],
        }
    }

    /// Left context in front of the next token of run `state.current`.
    fn prefix(&self, runs: &[Vec<String>; 4], current: usize) -> Vec<String> {
        let mut p = self.s1.clone();
        for (run, anchor) in runs.iter().zip(&self.anchors).take(current) {
            p.extend_from_slice(run);
            p.extend_from_slice(anchor);
        }
        p.extend_from_slice(&runs[current]);
        p
    }
}

fn frames(
    tuples: &TupleSet,
    pairs: &[ContextPair],
    t1_label: &str,
    t2_label: &str,
) -> Result<Vec<Frame>> {
    if tuples.is_empty() {
        return Err(Error::InvalidArgument("template search needs at least one tuple".into()));
    }
    if pairs.len() != tuples.len() {
        return Err(Error::InvalidArgument(format!(
            "{} context pairs for {} tuples",
            pairs.len(),
            tuples.len()
        )));
    }
    let (t1, t2) = (tokenize_words(t1_label), tokenize_words(t2_label));
    if t1.is_empty() || t2.is_empty() {
        return Err(Error::InvalidArgument("timestamp labels must contain a token".into()));
    }
    Ok(tuples
        .iter()
        .zip(pairs)
        .map(|(t, p)| Frame::new(t, p, &t1, &t2))
        .collect())
}

/// Oracle scores of one open state, summed over tuples.
struct StepScores {
    /// Per vocabulary token.
    extend: Vec<f64>,
    close: f64,
}

fn score_step(
    oracle: &dyn LikelihoodOracle,
    frames: &[Frame],
    state: &SearchState,
    vocab: &[Vec<String>],
) -> Result<StepScores> {
    let per_tuple: Vec<Vec<f64>> = frames
        .par_iter()
        .map(|f| {
            let mut cands = vocab.to_vec();
            cands.push(vec![f.anchors[state.current][0].clone()]);
            let prefix = f.prefix(&state.runs, state.current);
            let out = oracle.logprob(&prefix, &cands)?;
            if out.len() != cands.len() {
                return Err(Error::InvalidArgument(format!(
                    "oracle returned {} scores for {} candidates",
                    out.len(),
                    cands.len()
                )));
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let n = vocab.len();
    let mut extend = vec![0.0; n];
    let mut close = 0.0;
    for lps in &per_tuple {
        for (e, lp) in extend.iter_mut().zip(lps) {
            *e += lp;
        }
        close += lps[n];
    }
    Ok(StepScores { extend, close })
}

/// Induce templates by beam search. Returns up to `top_n` distinct templates,
/// best log-likelihood first.
pub fn search_templates(
    tuples: &TupleSet,
    oracle: &dyn LikelihoodOracle,
    pairs: &[ContextPair],
    t1_label: &str,
    t2_label: &str,
    cfg: &SearchConfig,
) -> Result<Vec<Template>> {
    let frames = frames(tuples, pairs, t1_label, t2_label)?;
    if cfg.beam_width == 0 {
        return Err(Error::InvalidArgument("beam width must be at least 1".into()));
    }
    let vocab: Vec<Vec<String>> = cfg
        .vocabulary
        .clone()
        .or_else(|| oracle.vocabulary())
        .ok_or_else(|| {
            Error::Config(format!(
                "oracle {} has no vocabulary; supply candidate slot tokens",
                oracle.info().name
            ))
        })?
        .into_iter()
        .map(|w| vec![w])
        .collect();

    let mut beam = vec![SearchState {
        runs: Default::default(),
        current: 0,
        loglik: 0.0,
    }];
    let mut finished: Vec<SearchState> = Vec::new();

    while !beam.is_empty() {
        let mut next: Vec<SearchState> = Vec::new();
        for state in beam {
            let run_len = state.runs[state.current].len();
            let scores = if run_len >= cfg.max_slot_len {
                None
            } else {
                Some(score_step(oracle, &frames, &state, &vocab)?)
            };
            let closes = match &scores {
                None => true,
                Some(s) => s.extend.iter().all(|&x| s.close >= x),
            };
            if closes {
                let mut closed = state;
                closed.current += 1;
                if closed.current == 4 {
                    finished.push(closed);
                } else {
                    next.push(closed);
                }
            } else {
                let scores = scores.unwrap();
                for (tok, lp) in vocab.iter().zip(scores.extend) {
                    let mut s = state.clone();
                    s.runs[s.current].push(tok[0].clone());
                    s.loglik += lp;
                    next.push(s);
                }
            }
        }
        // stable: equal scores keep generation order
        next.sort_by(|a, b| b.loglik.total_cmp(&a.loglik));
        next.truncate(cfg.beam_width);
        beam = next;
    }

    finished.sort_by(|a, b| b.loglik.total_cmp(&a.loglik));
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for s in finished {
        let t = Template::from_runs(&s.runs, s.loglik);
        if seen.insert(t.normalized()) {
            out.push(t);
            if out.len() == cfg.top_n {
                break;
            }
        }
    }
    Ok(out)
}

/// Log-likelihood of a frame-shaped template's literal runs, summed over
/// tuples, each token conditioned on everything to its left.
pub fn aggregate_loglik(
    template: &Template,
    tuples: &TupleSet,
    oracle: &dyn LikelihoodOracle,
    pairs: &[ContextPair],
    t1_label: &str,
    t2_label: &str,
) -> Result<f64> {
    let runs = template.frame_runs()?;
    let frames = frames(tuples, pairs, t1_label, t2_label)?;
    let mut total = 0.0;
    for f in &frames {
        for (i, run) in runs.iter().enumerate() {
            if run.is_empty() {
                continue;
            }
            let prefix = f.prefix(&runs, i);
            // `prefix` already holds `run`; score the run as one candidate
            let prefix = &prefix[..prefix.len() - run.len()];
            total += oracle.logprob(prefix, std::slice::from_ref(run))?[0];
        }
    }
    Ok(total)
}
