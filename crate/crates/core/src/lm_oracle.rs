//! Token likelihood oracles used by template search.
//!
//! Two implementations share the [`LikelihoodOracle`] interface:
//!
//! - [`NGramLM`], an add-α n-gram model that is cheap, deterministic and
//!   exhaustively checkable;
//! - [`ExternalOracle`], a client for a peer process (typically a seq2seq
//!   model server) speaking a newline-delimited JSON protocol.
//!
//! Protocol, one JSON record per line in each direction:
//!
//! ```text
//! server -> {"proto": 1, "name": "...", "max_context": 512 | null}       (handshake)
//! client -> {"id": 7, "op": "score", "prefix": ["a", "b"], "candidates": [["c"], ["d", "e"]]}
//! server -> {"id": 7, "logprobs": [-1.5, -4.25]}
//!         | {"id": 7, "error": "..."}
//! ```
//!
//! Responses may arrive in any order and are matched to requests by id.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, RecvTimeoutError};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use serde::Serialize;
use serde_json::Value;
use thiserror::Error;

use crate::corpus::Snapshot;
use crate::error::{Error, Result};

pub const UNKNOWN_TOKEN: &str = "<unk>";

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("query has no candidates")]
    NoCandidates,

    #[error("request {id}: context of {len} tokens exceeds the oracle maximum of {max}")]
    ContextOverflow { id: u64, len: usize, max: usize },

    #[error("request {}: protocol violation at line {line}: {message}", fmt_id(*.id))]
    Protocol {
        id: Option<u64>,
        line: usize,
        message: String,
    },

    #[error("request {id}: peer reported error: {message}")]
    Peer { id: u64, message: String },

    #[error("request {id}: peer closed the connection")]
    Disconnected { id: u64 },

    #[error("request {id}: no response within {timeout:?}")]
    Timeout { id: u64, timeout: Duration },

    #[error("oracle transport: {0}")]
    Transport(String),
}

fn fmt_id(id: Option<u64>) -> String {
    id.map_or_else(|| "<unknown>".to_owned(), |i| i.to_string())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OracleInfo {
    pub name: String,
    /// Longest prefix + candidate the oracle accepts, in tokens.
    pub max_context: Option<usize>,
}

/// A deterministic scorer of token continuations.
///
/// For a fixed `(prefix, candidates)` query, repeated calls return identical
/// values, all `<= 0`.
pub trait LikelihoodOracle: Send + Sync {
    fn info(&self) -> OracleInfo;

    /// Tokens the oracle can propose as single-token continuations, if known.
    fn vocabulary(&self) -> Option<Vec<String>> {
        None
    }

    /// Log-probability of each candidate following `prefix`. A multi-token
    /// candidate scores the sum of its tokens, each conditioned on the prefix
    /// and the candidate tokens before it.
    fn logprob(&self, prefix: &[String], candidates: &[Vec<String>]) -> Result<Vec<f64>, OracleError>;
}

#[derive(Default, Clone, Debug)]
struct ContextCounts {
    next: HashMap<u32, u32>,
    total: u32,
}

/// Add-α n-gram language model. Contexts never seen in training back off to
/// successively shorter ones, down to the unigram distribution.
#[derive(Clone, Debug)]
pub struct NGramLM {
    order: usize,
    alpha: f64,
    words: Vec<String>,
    index: HashMap<String, u32>,
    unk: u32,
    contexts: HashMap<Vec<u32>, ContextCounts>,
}

impl NGramLM {
    /// Train on the sentences of `snapshots`. The vocabulary is the union of
    /// their vocabularies plus [`UNKNOWN_TOKEN`]. N-grams never cross a
    /// sentence boundary.
    pub fn train(snapshots: &[&Snapshot], order: usize, alpha: f64) -> Result<Self> {
        if order == 0 {
            return Err(Error::InvalidArgument("n-gram order must be at least 1".into()));
        }
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::InvalidArgument(format!("alpha must be positive, got {alpha}")));
        }
        if snapshots.iter().all(|s| s.is_empty()) {
            return Err(Error::EmptyCorpus);
        }

        let mut words: Vec<String> = snapshots
            .iter()
            .flat_map(|s| s.vocab().iter().map(|(_, w)| w.to_owned()))
            .collect();
        words.sort_unstable();
        words.dedup();
        words.push(UNKNOWN_TOKEN.to_owned());
        let index: HashMap<String, u32> = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
        let unk = (words.len() - 1) as u32;

        let mut contexts: HashMap<Vec<u32>, ContextCounts> = HashMap::new();
        for snapshot in snapshots {
            for s in 0..snapshot.n_sentences() {
                let ids: Vec<u32> = snapshot.sentence_words(s).map(|w| index[w]).collect();
                for (i, &x) in ids.iter().enumerate() {
                    for len in 0..order.min(i + 1) {
                        let ctx = ids[i - len..i].to_vec();
                        let c = contexts.entry(ctx).or_default();
                        *c.next.entry(x).or_insert(0) += 1;
                        c.total += 1;
                    }
                }
            }
        }

        Ok(NGramLM {
            order,
            alpha,
            words,
            index,
            unk,
            contexts,
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Vocabulary size including the unknown token.
    pub fn vocab_size(&self) -> usize {
        self.words.len()
    }

    fn id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(self.unk)
    }

    /// `P(x | history)` using the longest seen suffix of the last `order - 1`
    /// history tokens.
    fn prob(&self, history: &[u32], x: u32) -> f64 {
        let start = history.len().saturating_sub(self.order - 1);
        let v = self.words.len() as f64;
        for from in start..=history.len() {
            if let Some(c) = self.contexts.get(&history[from..]) {
                let hits = c.next.get(&x).copied().unwrap_or(0) as f64;
                return (hits + self.alpha) / (c.total as f64 + self.alpha * v);
            }
        }
        // only reachable when trained on nothing, which `train` rejects
        1.0 / v
    }

    /// Natural-log probability of `word` after `history`.
    pub fn token_logprob(&self, history: &[String], word: &str) -> f64 {
        let ids: Vec<u32> = history.iter().map(|w| self.id(w)).collect();
        self.prob(&ids, self.id(word)).ln()
    }
}

impl LikelihoodOracle for NGramLM {
    fn info(&self) -> OracleInfo {
        OracleInfo {
            name: format!("ngram(n={}, alpha={})", self.order, self.alpha),
            max_context: None,
        }
    }

    fn vocabulary(&self) -> Option<Vec<String>> {
        Some(self.words[..self.words.len() - 1].to_vec())
    }

    fn logprob(&self, prefix: &[String], candidates: &[Vec<String>]) -> Result<Vec<f64>, OracleError> {
        if candidates.is_empty() {
            return Err(OracleError::NoCandidates);
        }
        let keep = self.order.saturating_sub(1);
        let tail: Vec<u32> = prefix[prefix.len().saturating_sub(keep)..]
            .iter()
            .map(|w| self.id(w))
            .collect();
        Ok(candidates
            .iter()
            .map(|cand| {
                let mut history = tail.clone();
                let mut total = 0.0;
                for w in cand {
                    let x = self.id(w);
                    total += self.prob(&history, x).ln();
                    history.push(x);
                }
                total
            })
            .collect())
    }
}

#[derive(Serialize)]
struct ScoreRequest<'a> {
    id: u64,
    op: &'static str,
    prefix: &'a [String],
    candidates: &'a [Vec<String>],
}

type Reply = Result<(Vec<f64>, usize), OracleError>;

#[derive(Default)]
struct Pending {
    waiting: HashMap<u64, mpsc::Sender<Reply>>,
    /// Set once the reader has stopped; new requests fail immediately.
    closed: Option<String>,
}

#[derive(Clone, Debug)]
pub struct ExternalOptions {
    pub timeout: Duration,
    /// Re-sends of a timed-out request (same id) before giving up.
    pub retries: u32,
}

impl Default for ExternalOptions {
    fn default() -> Self {
        ExternalOptions {
            timeout: Duration::from_secs(120),
            retries: 1,
        }
    }
}

/// Client for an oracle served by a peer over the line protocol.
pub struct ExternalOracle {
    info: OracleInfo,
    writer: Mutex<Box<dyn Write + Send>>,
    pending: Arc<Mutex<Pending>>,
    next_id: AtomicU64,
    opts: ExternalOptions,
    child: Option<Child>,
    reader: Option<JoinHandle<()>>,
}

impl ExternalOracle {
    /// Connect over an arbitrary byte stream pair and complete the handshake.
    pub fn connect<R, W>(reader: R, writer: W, opts: ExternalOptions) -> Result<Self, OracleError>
    where
        R: Read + Send + 'static,
        W: Write + Send + 'static,
    {
        let pending = Arc::new(Mutex::new(Pending::default()));
        let (hs_tx, hs_rx) = mpsc::channel();
        let shared = Arc::clone(&pending);
        let handle = std::thread::Builder::new()
            .name("oracle-reader".into())
            .spawn(move || read_loop(BufReader::new(reader), shared, hs_tx))
            .map_err(|e| OracleError::Transport(e.to_string()))?;

        let info = match hs_rx.recv_timeout(opts.timeout) {
            Ok(result) => result?,
            Err(RecvTimeoutError::Timeout) => {
                return Err(OracleError::Protocol {
                    id: None,
                    line: 1,
                    message: format!("no handshake within {:?}", opts.timeout),
                })
            }
            Err(RecvTimeoutError::Disconnected) => {
                return Err(OracleError::Protocol {
                    id: None,
                    line: 1,
                    message: "peer closed before the handshake".into(),
                })
            }
        };

        Ok(ExternalOracle {
            info,
            writer: Mutex::new(Box::new(writer)),
            pending,
            next_id: AtomicU64::new(1),
            opts,
            child: None,
            reader: Some(handle),
        })
    }

    /// Spawn `program args...` and talk to it over its standard streams.
    pub fn spawn(command: &[String], opts: ExternalOptions) -> Result<Self, OracleError> {
        let (program, args) = command
            .split_first()
            .ok_or_else(|| OracleError::Transport("empty oracle command".into()))?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| OracleError::Transport(format!("cannot start {program}: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let mut oracle = Self::connect(stdout, stdin, opts)?;
        oracle.child = Some(child);
        Ok(oracle)
    }

    /// Connect to a peer listening on a local socket.
    #[cfg(unix)]
    pub fn connect_unix(path: &std::path::Path, opts: ExternalOptions) -> Result<Self, OracleError> {
        let stream = std::os::unix::net::UnixStream::connect(path)
            .map_err(|e| OracleError::Transport(format!("{}: {e}", path.display())))?;
        let reader = stream
            .try_clone()
            .map_err(|e| OracleError::Transport(e.to_string()))?;
        Self::connect(reader, stream, opts)
    }

    fn send(&self, line: &[u8]) -> Result<(), String> {
        let mut w = self.writer.lock().unwrap();
        w.write_all(line)
            .and_then(|_| w.write_all(b"\n"))
            .and_then(|_| w.flush())
            .map_err(|e| e.to_string())
    }

    fn request(&self, prefix: &[String], candidates: &[Vec<String>]) -> Reply {
        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        if let Some(max) = self.info.max_context {
            let longest = candidates.iter().map(Vec::len).max().unwrap_or(0);
            let len = prefix.len() + longest;
            if len > max {
                return Err(OracleError::ContextOverflow { id, len, max });
            }
        }
        let line = serde_json::to_vec(&ScoreRequest {
            id,
            op: "score",
            prefix,
            candidates,
        })
        .map_err(|e| OracleError::Transport(e.to_string()))?;

        let (tx, rx) = mpsc::channel();
        {
            let mut p = self.pending.lock().unwrap();
            if p.closed.is_some() {
                return Err(OracleError::Disconnected { id });
            }
            p.waiting.insert(id, tx);
        }
        let outcome = (|| {
            for _ in 0..=self.opts.retries {
                if let Err(e) = self.send(&line) {
                    return Err(OracleError::Transport(format!("request {id}: {e}")));
                }
                match rx.recv_timeout(self.opts.timeout) {
                    Ok(reply) => return reply,
                    Err(RecvTimeoutError::Timeout) => continue,
                    Err(RecvTimeoutError::Disconnected) => {
                        return Err(OracleError::Disconnected { id })
                    }
                }
            }
            Err(OracleError::Timeout {
                id,
                timeout: self.opts.timeout,
            })
        })();
        self.pending.lock().unwrap().waiting.remove(&id);
        match outcome {
            Ok((values, line)) if values.len() != candidates.len() => Err(OracleError::Protocol {
                id: Some(id),
                line,
                message: format!("{} logprobs for {} candidates", values.len(), candidates.len()),
            }),
            other => other,
        }
    }
}

impl LikelihoodOracle for ExternalOracle {
    fn info(&self) -> OracleInfo {
        self.info.clone()
    }

    fn logprob(&self, prefix: &[String], candidates: &[Vec<String>]) -> Result<Vec<f64>, OracleError> {
        if candidates.is_empty() {
            return Err(OracleError::NoCandidates);
        }
        let (values, _line) = self.request(prefix, candidates)?;
        Ok(values)
    }
}

impl Drop for ExternalOracle {
    fn drop(&mut self) {
        // Closing our end of the pipe tells a well-behaved peer to exit.
        *self.writer.lock().unwrap() = Box::new(std::io::sink());
        if let Some(mut child) = self.child.take() {
            let _ = child.kill();
            let _ = child.wait();
        }
        // The reader thread exits on EOF; joining could block on a live socket.
        if let Some(handle) = self.reader.take() {
            if handle.is_finished() {
                let _ = handle.join();
            }
        }
    }
}

fn parse_handshake(line: &str) -> Result<OracleInfo, OracleError> {
    let bad = |message: String| OracleError::Protocol {
        id: None,
        line: 1,
        message,
    };
    let v: Value = serde_json::from_str(line).map_err(|e| bad(format!("handshake is not JSON: {e}")))?;
    if v.get("proto").and_then(Value::as_u64) != Some(1) {
        return Err(bad(format!("unsupported handshake {line}")));
    }
    let name = v
        .get("name")
        .and_then(Value::as_str)
        .ok_or_else(|| bad("handshake lacks a name".into()))?
        .to_owned();
    let max_context = match v.get("max_context") {
        None | Some(Value::Null) => None,
        Some(m) => Some(
            m.as_u64()
                .ok_or_else(|| bad("max_context must be an integer or null".into()))?
                as usize,
        ),
    };
    Ok(OracleInfo { name, max_context })
}

/// Decode one response. `Err((id, error))` carries the id when it could be
/// recovered from the record.
fn parse_response(text: &str, line: usize) -> Result<(u64, Reply), (Option<u64>, OracleError)> {
    let protocol = |id, message: String| OracleError::Protocol { id, line, message };
    let v: Value = serde_json::from_str(text)
        .map_err(|e| (None, protocol(None, format!("malformed record: {e}"))))?;
    let id = v
        .get("id")
        .and_then(Value::as_u64)
        .ok_or_else(|| (None, protocol(None, "record has no integer id".into())))?;

    if let Some(message) = v.get("error") {
        let message = message.as_str().map_or_else(|| message.to_string(), str::to_owned);
        return Ok((id, Err(OracleError::Peer { id, message })));
    }
    let values = v
        .get("logprobs")
        .and_then(Value::as_array)
        .ok_or_else(|| (Some(id), protocol(Some(id), "record has neither logprobs nor error".into())))?;
    let values = values
        .iter()
        .map(|x| x.as_f64().filter(|f| f.is_finite() && *f <= 0.0))
        .collect::<Option<Vec<f64>>>()
        .ok_or_else(|| {
            (
                Some(id),
                protocol(Some(id), "logprobs must be finite numbers <= 0".into()),
            )
        })?;
    Ok((id, Ok((values, line))))
}

fn read_loop<R: BufRead>(
    reader: R,
    pending: Arc<Mutex<Pending>>,
    handshake: mpsc::Sender<Result<OracleInfo, OracleError>>,
) {
    let mut lines = reader.lines();
    let first = match lines.next() {
        Some(Ok(l)) => parse_handshake(&l),
        Some(Err(e)) => Err(OracleError::Transport(e.to_string())),
        None => {
            // dropping the sender reports a closed peer
            pending.lock().unwrap().closed = Some("peer closed before the handshake".into());
            return;
        }
    };
    let ok = first.is_ok();
    let _ = handshake.send(first);
    if !ok {
        pending.lock().unwrap().closed = Some("handshake failed".into());
        return;
    }

    let mut lineno = 1;
    let reason = loop {
        let text = match lines.next() {
            None => break "peer closed the connection".to_owned(),
            Some(Err(e)) => break e.to_string(),
            Some(Ok(t)) => t,
        };
        lineno += 1;
        if text.trim().is_empty() {
            continue;
        }
        match parse_response(&text, lineno) {
            Ok((id, reply)) => {
                if let Some(tx) = pending.lock().unwrap().waiting.get(&id) {
                    let _ = tx.send(reply);
                } else {
                    log::debug!("dropping response for unknown or finished request {id}");
                }
            }
            Err((Some(id), err)) => {
                if let Some(tx) = pending.lock().unwrap().waiting.get(&id) {
                    let _ = tx.send(Err(err));
                }
            }
            Err((None, _)) => {
                // Cannot tell which request this answered: fail everything.
                let mut p = pending.lock().unwrap();
                for (&id, tx) in &p.waiting {
                    let _ = tx.send(Err(OracleError::Protocol {
                        id: Some(id),
                        line: lineno,
                        message: format!("unattributable record {text:?}"),
                    }));
                }
                p.waiting.clear();
                p.closed = Some(format!("protocol violation at line {lineno}"));
                return;
            }
        }
    };

    let mut p = pending.lock().unwrap();
    p.closed = Some(reason);
    // Dropping the senders wakes waiters with `Disconnected`.
    p.waiting.clear();
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Write};
    use std::os::unix::net::UnixStream;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_owned).collect()
    }

    fn snapshot(sentences: &[&str]) -> Snapshot {
        Snapshot::from_tokenized("t", sentences.iter().map(|s| vec![toks(s)]))
    }

    #[test]
    fn bigram_counts_with_vanishing_alpha() {
        let s = snapshot(&["a b", "a b"]);
        let lm = NGramLM::train(&[&s], 2, 1e-12).unwrap();
        let p = lm.logprob(&toks("a"), &[toks("b")]).unwrap()[0].exp();
        assert!((p - 1.0).abs() < 1e-9);
    }

    #[test]
    fn bigram_add_alpha_formula() {
        let s = snapshot(&["a b", "a b"]);
        let alpha = 0.1;
        let lm = NGramLM::train(&[&s], 2, alpha).unwrap();
        assert_eq!(lm.vocab_size(), 3);
        let want = ((2.0 + alpha) / (2.0 + alpha * 3.0)).ln();
        let got = lm.logprob(&toks("a"), &[toks("b")]).unwrap()[0];
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn large_alpha_is_uniform() {
        let s = snapshot(&["a b", "a b c"]);
        let lm = NGramLM::train(&[&s], 3, 1e12).unwrap();
        let v = lm.vocab_size() as f64;
        for w in ["a", "b", "c", "zzz"] {
            let p = lm.logprob(&toks("a b"), &[vec![w.into()]]).unwrap()[0].exp();
            assert!((p - 1.0 / v).abs() < 1e-9);
        }
    }

    #[test]
    fn unigram_ignores_context() {
        let s = snapshot(&["a b", "a c", "a"]);
        let lm = NGramLM::train(&[&s], 1, 0.5).unwrap();
        let x = lm.logprob(&toks("b"), &[toks("a")]).unwrap();
        let y = lm.logprob(&toks("c a c"), &[toks("a")]).unwrap();
        assert_eq!(x, y);
        // (3 + 0.5) / (5 + 0.5 * 4)
        assert!((x[0] - (3.5f64 / 7.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn empty_candidate_and_uniform_pair() {
        let s = snapshot(&["a b"]);
        let lm = NGramLM::train(&[&s], 2, 1e9).unwrap();
        let out = lm.logprob(&toks("a"), &[vec![], toks("a"), toks("b")]).unwrap();
        assert_eq!(out[0], 0.0);
        assert!((out[1] - out[2]).abs() < 1e-8);
        assert!((out[1] - (1.0 / 3.0f64).ln()).abs() < 1e-6);
        assert!(matches!(lm.logprob(&[], &[]), Err(OracleError::NoCandidates)));
    }

    #[test]
    fn train_rejects_bad_arguments() {
        let s = snapshot(&["a"]);
        assert!(NGramLM::train(&[&s], 0, 0.1).is_err());
        assert!(NGramLM::train(&[&s], 2, 0.0).is_err());
        let empty = Snapshot::from_tokenized("t", Vec::<Vec<Vec<String>>>::new());
        assert!(matches!(NGramLM::train(&[&empty], 2, 0.1), Err(Error::EmptyCorpus)));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_corpus() -> impl Strategy<Value = Vec<Vec<String>>> {
            let sentence = proptest::collection::vec(0u8..6, 1..7)
                .prop_map(|v| v.into_iter().map(|i| format!("w{i}")).collect::<Vec<_>>());
            proptest::collection::vec(sentence, 1..15)
        }

        fn arb_context() -> impl Strategy<Value = Vec<String>> {
            proptest::collection::vec(0u8..8, 0..5)
                .prop_map(|v| v.into_iter().map(|i| format!("w{i}")).collect())
        }

        proptest! {
            #[test]
            fn distributions_sum_to_one(corpus in arb_corpus(), ctx in arb_context(),
                                        n in 1usize..5, alpha in 0.01f64..3.0) {
                let s = Snapshot::from_tokenized("t", corpus.into_iter().map(|x| vec![x]));
                let lm = NGramLM::train(&[&s], n, alpha).unwrap();
                let mut vocab = lm.vocabulary().unwrap();
                vocab.push(UNKNOWN_TOKEN.into());
                let cands: Vec<Vec<String>> = vocab.into_iter().map(|w| vec![w]).collect();
                let lps = lm.logprob(&ctx, &cands).unwrap();
                let total: f64 = lps.iter().map(|x| x.exp()).sum();
                prop_assert!((total - 1.0).abs() < 1e-9);
                prop_assert!(lps.iter().all(|&x| x <= 0.0));
            }

            #[test]
            fn two_token_candidate_is_additive(corpus in arb_corpus(), ctx in arb_context(),
                                               a in 0u8..7, b in 0u8..7, n in 1usize..4) {
                let s = Snapshot::from_tokenized("t", corpus.into_iter().map(|x| vec![x]));
                let lm = NGramLM::train(&[&s], n, 0.1).unwrap();
                let (a, b) = (format!("w{a}"), format!("w{b}"));
                let joint = lm.logprob(&ctx, &[vec![a.clone(), b.clone()]]).unwrap()[0];
                let first = lm.logprob(&ctx, &[vec![a.clone()]]).unwrap()[0];
                let mut longer = ctx.clone();
                longer.push(a);
                let second = lm.logprob(&longer, &[vec![b]]).unwrap()[0];
                prop_assert!((joint - (first + second)).abs() < 1e-12);
                prop_assert_eq!(lm.logprob(&longer, &[vec!["w1".into()]]).unwrap(),
                                lm.logprob(&longer, &[vec!["w1".into()]]).unwrap());
            }
        }
    }

    /// Scripted peer: writes the handshake, then hands each request to `reply`,
    /// which returns the raw lines to send back.
    fn peer<F>(handshake: &'static str, mut reply: F) -> (UnixStream, std::thread::JoinHandle<()>)
    where
        F: FnMut(Value) -> Vec<String> + Send + 'static,
    {
        let (ours, theirs) = UnixStream::pair().unwrap();
        let handle = std::thread::spawn(move || {
            let mut out = theirs.try_clone().unwrap();
            writeln!(out, "{handshake}").unwrap();
            for line in BufReader::new(theirs).lines() {
                let Ok(line) = line else { break };
                let req: Value = serde_json::from_str(&line).unwrap();
                for l in reply(req) {
                    if writeln!(out, "{l}").is_err() {
                        return;
                    }
                }
            }
        });
        (ours, handle)
    }

    fn client(stream: UnixStream, timeout_ms: u64) -> Result<ExternalOracle, OracleError> {
        let reader = stream.try_clone().unwrap();
        ExternalOracle::connect(
            reader,
            stream,
            ExternalOptions {
                timeout: Duration::from_millis(timeout_ms),
                retries: 1,
            },
        )
    }

    const HELLO: &str = r#"{"proto": 1, "name": "echo", "max_context": null}"#;

    #[test]
    fn echo_values_are_bit_identical() {
        let stated = "[-0.1, -1.0000000000000002, -7.389056098930650e-5, -0.0]";
        let (s, _h) = peer(HELLO, move |req| {
            assert_eq!(req["op"], "score");
            assert_eq!(req["prefix"], serde_json::json!(["a", "b"]));
            vec![format!(r#"{{"id": {}, "logprobs": {stated}}}"#, req["id"])]
        });
        let oracle = client(s, 2000).unwrap();
        assert_eq!(oracle.info().name, "echo");
        let cands = vec![toks("x"), toks("y"), toks("z w"), vec![]];
        let got = oracle.logprob(&toks("a b"), &cands).unwrap();
        let want: Vec<f64> = serde_json::from_str(stated).unwrap();
        assert_eq!(
            got.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            want.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(got[1], -1.0000000000000002);
    }

    #[test]
    fn out_of_order_responses_match_by_id() {
        // Hold the first request and answer it after the second one.
        let mut held: Option<Value> = None;
        let (s, _h) = peer(HELLO, move |req| {
            let answer = |r: &Value| {
                let n = r["prefix"][0].as_str().unwrap().len() as f64;
                format!(r#"{{"id": {}, "logprobs": [{}]}}"#, r["id"], -n)
            };
            match held.take() {
                None => {
                    held = Some(req);
                    vec![]
                }
                Some(first) => vec![answer(&req), answer(&first)],
            }
        });
        let oracle = Arc::new(client(s, 5000).unwrap());
        let o1 = Arc::clone(&oracle);
        let t = std::thread::spawn(move || o1.logprob(&toks("aaa"), &[toks("x")]).unwrap());
        std::thread::sleep(Duration::from_millis(100));
        let second = oracle.logprob(&toks("bbbbb"), &[toks("x")]).unwrap();
        assert_eq!(second, vec![-5.0]);
        assert_eq!(t.join().unwrap(), vec![-3.0]);
    }

    #[test]
    fn malformed_response_names_line_and_request() {
        let (s, _h) = peer(HELLO, |req| {
            vec![format!(r#"{{"id": {}, "logprobs": "oops"}}"#, req["id"])]
        });
        let oracle = client(s, 2000).unwrap();
        match oracle.logprob(&toks("a"), &[toks("b")]).unwrap_err() {
            OracleError::Protocol { id, line, .. } => {
                assert_eq!(id, Some(1));
                assert_eq!(line, 2);
            }
            e => panic!("unexpected {e}"),
        }

        let (s, _h) = peer(HELLO, |_| vec!["this is not json".into()]);
        let oracle = client(s, 2000).unwrap();
        let err = oracle.logprob(&toks("a"), &[toks("b")]).unwrap_err();
        assert_eq!(
            err.to_string().split(':').next().unwrap(),
            "request 1",
            "{err}"
        );
        assert!(matches!(err, OracleError::Protocol { line: 2, .. }));
    }

    #[test]
    fn shape_is_validated() {
        let (s, _h) = peer(HELLO, |req| {
            vec![format!(r#"{{"id": {}, "logprobs": [0.5]}}"#, req["id"])]
        });
        let oracle = client(s, 2000).unwrap();
        assert!(oracle.logprob(&toks("a"), &[toks("b")]).is_err());

        let (s, _h) = peer(HELLO, |req| {
            vec![format!(r#"{{"id": {}, "logprobs": [-0.5, -0.5]}}"#, req["id"])]
        });
        let oracle = client(s, 2000).unwrap();
        assert!(oracle.logprob(&toks("a"), &[toks("b")]).is_err());
    }

    #[test]
    fn peer_error_records_surface_with_id() {
        let (s, _h) = peer(HELLO, |req| {
            vec![format!(r#"{{"id": {}, "error": "model exploded"}}"#, req["id"])]
        });
        let oracle = client(s, 2000).unwrap();
        let err = oracle.logprob(&toks("a"), &[toks("b")]).unwrap_err();
        assert_eq!(err.to_string(), "request 1: peer reported error: model exploded");
    }

    #[test]
    fn timeout_after_retries() {
        let calls = Arc::new(AtomicU64::new(0));
        let seen = Arc::clone(&calls);
        let (s, _h) = peer(HELLO, move |req| {
            seen.fetch_add(1, Ordering::SeqCst);
            assert_eq!(req["id"], 1, "retries reuse the id");
            vec![]
        });
        let oracle = client(s, 100).unwrap();
        let err = oracle.logprob(&toks("a"), &[toks("b")]).unwrap_err();
        assert!(matches!(err, OracleError::Timeout { id: 1, .. }));
        assert_eq!(calls.load(Ordering::SeqCst), 2);
    }

    #[test]
    fn late_duplicate_after_retry_is_ignored() {
        let mut first = true;
        let (s, _h) = peer(HELLO, move |req| {
            if first {
                first = false;
                return vec![];
            }
            // answer the retry twice
            let l = format!(r#"{{"id": {}, "logprobs": [-2.0]}}"#, req["id"]);
            vec![l.clone(), l]
        });
        let oracle = client(s, 200).unwrap();
        assert_eq!(oracle.logprob(&toks("a"), &[toks("b")]).unwrap(), vec![-2.0]);
        // the stray duplicate for request 1 does not leak into request 2
        assert_eq!(oracle.logprob(&toks("a"), &[toks("c")]).unwrap(), vec![-2.0]);
    }

    #[test]
    fn peer_exit_is_reported() {
        let (s, h) = peer(HELLO, |_| panic!("peer dies"));
        let oracle = client(s, 2000).unwrap();
        let err = oracle.logprob(&toks("a"), &[toks("b")]).unwrap_err();
        assert!(matches!(err, OracleError::Disconnected { id: 1 }), "{err}");
        assert!(h.join().is_err());
    }

    #[test]
    fn context_overflow_is_explicit() {
        let (s, _h) = peer(r#"{"proto": 1, "name": "small", "max_context": 3}"#, |_| vec![]);
        let oracle = client(s, 2000).unwrap();
        assert_eq!(oracle.info().max_context, Some(3));
        let err = oracle.logprob(&toks("a b"), &[toks("c d")]).unwrap_err();
        assert!(matches!(err, OracleError::ContextOverflow { len: 4, max: 3, .. }));
    }

    #[test]
    fn bad_handshake_is_rejected() {
        let (s, _h) = peer(r#"{"proto": 2, "name": "future"}"#, |_| vec![]);
        assert!(matches!(client(s, 2000), Err(OracleError::Protocol { line: 1, .. })));
    }
}
