//! End-to-end driver: corpora in, tuples, templates, prompts and training
//! data out, with a manifest of content digests.
//!
//! Tuple and template stages are cached under `<output>/cache`, keyed by a
//! digest of everything they depend on, so an interrupted run resumes from
//! the last finished stage.

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{load_snapshot, preprocess, split, InputFormat, Snapshot, SplitSpec};
use crate::embeddings::{load_table, EmbeddingTable};
use crate::error::{Error, Result};
use crate::lm_oracle::{ExternalOptions, ExternalOracle, LikelihoodOracle, NGramLM};
use crate::prompts::{emit_training_file, generate_prompts, write_prompts, MaskConfig, Prompt};
use crate::stats::{count, SnapshotStats};
use crate::templates::{read_templates, search_templates, select_context_pairs, write_templates, SearchConfig, Template};
use crate::tuples::{
    build_anchor_sets, build_cont_tuples, build_div_tuples, build_freq_tuples, read_tuples, select_pivots,
    write_tuples, AnchorConfig, Method, TupleSet,
};

/// Tuple budgets used in the reported experiments.
pub const K_GRID: [usize; 5] = [500, 1000, 2000, 5000, 10000];

pub const TUPLES_FILE: &str = "tuples.tsv";
pub const TEMPLATES_FILE: &str = "templates.txt";
pub const PROMPTS_FILE: &str = "prompts.txt";
pub const TRAIN_FILE: &str = "train.jsonl";
pub const HELDOUT_FILE: &str = "heldout_t2.txt";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub c1: PathBuf,
    pub c2: PathBuf,
    pub t1: String,
    pub t2: String,
    pub format: InputFormat,
    pub min_words: usize,
    pub split: SplitSpec,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            c1: PathBuf::new(),
            c2: PathBuf::new(),
            t1: "T1".into(),
            t2: "T2".into(),
            format: InputFormat::Lines,
            min_words: 10,
            split: SplitSpec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TupleConfig {
    pub method: Method,
    pub k: usize,
    pub m: usize,
    pub min_anchor_freq: u32,
    /// Candidate pool for `div` and `cont`, as a multiple of `k`.
    pub pool_factor: usize,
    pub emb_t1: Option<PathBuf>,
    pub emb_t2: Option<PathBuf>,
}

impl Default for TupleConfig {
    fn default() -> Self {
        TupleConfig {
            method: Method::Freq,
            k: 500,
            m: 10,
            min_anchor_freq: 5,
            pool_factor: 5,
            emb_t1: None,
            emb_t2: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemplateSource {
    Manual,
    Auto,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OracleKind {
    Ngram,
    Command,
    Socket,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TemplateConfig {
    pub source: TemplateSource,
    pub manual_file: Option<PathBuf>,
    pub beam_width: usize,
    pub max_slot_len: usize,
    pub top_n: usize,
    /// Tuples whose frames drive the search; 0 uses all of them.
    pub search_tuples: usize,
    /// Candidate slot tokens: the most frequent training words. 0 defers to
    /// the oracle's own vocabulary.
    pub search_vocab: usize,
    pub oracle: OracleKind,
    pub oracle_command: Vec<String>,
    pub oracle_socket: Option<PathBuf>,
    pub oracle_timeout_secs: u64,
    pub ngram_order: usize,
    pub ngram_alpha: f64,
}

impl Default for TemplateConfig {
    fn default() -> Self {
        TemplateConfig {
            source: TemplateSource::Manual,
            manual_file: None,
            beam_width: 100,
            max_slot_len: 5,
            top_n: 10,
            search_tuples: 20,
            search_vocab: 100,
            oracle: OracleKind::Ngram,
            oracle_command: Vec::new(),
            oracle_socket: None,
            oracle_timeout_secs: 120,
            ngram_order: 3,
            ngram_alpha: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PromptConfig {
    pub masks_per_prompt: usize,
    pub seed: u64,
    pub anchors_only: bool,
}

impl Default for PromptConfig {
    fn default() -> Self {
        PromptConfig {
            masks_per_prompt: 1,
            seed: 0,
            anchors_only: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub corpus: CorpusConfig,
    pub tuples: TupleConfig,
    pub templates: TemplateConfig,
    pub prompts: PromptConfig,
    /// Not part of the configuration digest.
    pub output: PathBuf,
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if !p.as_os_str().is_empty() && p.is_relative() {
        *p = base.join(&*p);
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Read a TOML file. Relative paths inside it are taken relative to the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        resolve(base, &mut self.corpus.c1);
        resolve(base, &mut self.corpus.c2);
        resolve(base, &mut self.output);
        for p in [
            &mut self.tuples.emb_t1,
            &mut self.tuples.emb_t2,
            &mut self.templates.manual_file,
            &mut self.templates.oracle_socket,
        ]
        .into_iter()
        .flatten()
        {
            resolve(base, p);
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.corpus.c1.as_os_str().is_empty() || self.corpus.c2.as_os_str().is_empty() {
            return bad("corpus.c1 and corpus.c2 are required".into());
        }
        if self.corpus.t1.trim().is_empty() || self.corpus.t2.trim().is_empty() {
            return bad("snapshot labels must be non-empty".into());
        }
        if self.corpus.t1 == self.corpus.t2 {
            return bad(format!("snapshot labels must differ, both are {:?}", self.corpus.t1));
        }
        self.corpus
            .split
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        if self.output.as_os_str().is_empty() {
            return bad("output directory is required".into());
        }
        let t = &self.tuples;
        if t.k == 0 {
            return bad("tuples.k must be at least 1".into());
        }
        if t.m == 0 {
            return bad("tuples.m must be at least 1".into());
        }
        if t.pool_factor == 0 {
            return bad("tuples.pool_factor must be at least 1".into());
        }
        if t.method == Method::Cont {
            if t.emb_t1.is_none() {
                return bad("missing embedding table for snapshot T1".into());
            }
            if t.emb_t2.is_none() {
                return bad("missing embedding table for snapshot T2".into());
            }
        }
        let tp = &self.templates;
        match tp.source {
            TemplateSource::Manual if tp.manual_file.is_none() => {
                return bad("templates.manual_file is required when source = \"manual\"".into())
            }
            TemplateSource::Auto => {
                if tp.beam_width == 0 || tp.max_slot_len == 0 || tp.top_n == 0 {
                    return bad("beam_width, max_slot_len and top_n must be at least 1".into());
                }
                match tp.oracle {
                    OracleKind::Ngram => {
                        if tp.ngram_order == 0 {
                            return bad("templates.ngram_order must be at least 1".into());
                        }
                        if !(tp.ngram_alpha > 0.0 && tp.ngram_alpha.is_finite()) {
                            return bad("templates.ngram_alpha must be positive".into());
                        }
                    }
                    OracleKind::Command if tp.oracle_command.is_empty() => {
                        return bad("templates.oracle_command is required when oracle = \"command\"".into())
                    }
                    OracleKind::Socket if tp.oracle_socket.is_none() => {
                        return bad("templates.oracle_socket is required when oracle = \"socket\"".into())
                    }
                    _ => {}
                }
            }
            _ => {}
        }
        if self.prompts.masks_per_prompt == 0 {
            return bad("prompts.masks_per_prompt must be at least 1".into());
        }
        Ok(())
    }

    /// Digest of the configuration without the output location.
    pub fn digest(&self) -> String {
        let mut c = self.clone();
        c.output = PathBuf::new();
        sha256_hex(serde_json::to_string(&c).expect("config serializes").as_bytes())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub name: String,
    /// Relative to the output directory.
    pub path: PathBuf,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub split: u64,
    pub mask: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_sha256: String,
    pub inputs: Vec<ArtifactEntry>,
    pub seeds: Seeds,
    pub artifacts: Vec<ArtifactEntry>,
}

impl Manifest {
    pub fn artifact(&self, name: &str) -> Option<&ArtifactEntry> {
        self.artifacts.iter().find(|a| a.name == name)
    }
}

/// Stages in execution order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Ingest,
    Stats,
    Tuples,
    Templates,
    Prompts,
    EmitTrain,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Stats => "stats",
            Stage::Tuples => "tuples",
            Stage::Templates => "templates",
            Stage::Prompts => "prompts",
            Stage::EmitTrain => "emit-train",
        }
    }
}

fn stage_err(stage: Stage, artifact: &Path) -> impl FnOnce(Error) -> Error + '_ {
    move |e| match e {
        e @ Error::Stage { .. } => e,
        e => Error::Stage {
            stage: stage.name(),
            artifact: artifact.to_path_buf(),
            source: Box::new(e),
        },
    }
}

fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<fs::File>) -> std::io::Result<()>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    // Write to a sibling and rename so a crash never leaves a truncated file.
    let tmp = path.with_extension("partial");
    let file = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    let mut w = BufWriter::new(file);
    f(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(&tmp, e))?;
    drop(w);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn write_documents(snapshot: &Snapshot, out: &mut impl Write) -> std::io::Result<()> {
    for d in 0..snapshot.n_documents() {
        writeln!(out, "{}", snapshot.document_text(d))?;
    }
    Ok(())
}

/// Training, development and test parts of both snapshots.
pub struct Ingested {
    pub c1: crate::corpus::Splits,
    pub c2: crate::corpus::Splits,
    pub input_digests: [String; 2],
}

/// State of a run, filled in stage by stage.
pub struct Pipeline {
    cfg: PipelineConfig,
    pub ingested: Option<Ingested>,
    pub stats: Option<(SnapshotStats, SnapshotStats)>,
    pub tuples: Option<TupleSet>,
    pub templates: Option<Vec<Template>>,
    pub prompts: Option<Vec<Prompt>>,
    oracle: Option<Box<dyn LikelihoodOracle>>,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Pipeline {
            cfg,
            ingested: None,
            stats: None,
            tuples: None,
            templates: None,
            prompts: None,
            oracle: None,
        })
    }

    /// Use this oracle for template search instead of the configured one.
    pub fn with_oracle(mut self, oracle: Box<dyn LikelihoodOracle>) -> Self {
        self.oracle = Some(oracle);
        self
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    fn out(&self, name: &str) -> PathBuf {
        self.cfg.output.join(name)
    }

    /// Run every stage up to and including `last`.
    pub fn run_until(&mut self, last: Stage) -> Result<()> {
        for stage in [
            Stage::Ingest,
            Stage::Stats,
            Stage::Tuples,
            Stage::Templates,
            Stage::Prompts,
            Stage::EmitTrain,
        ] {
            if stage > last {
                break;
            }
            match stage {
                Stage::Ingest => self.ingest()?,
                Stage::Stats => self.stats()?,
                Stage::Tuples => self.build_tuples()?,
                Stage::Templates => self.build_templates()?,
                Stage::Prompts => self.build_prompts()?,
                Stage::EmitTrain => self.emit_train()?,
            }
        }
        Ok(())
    }

    pub fn ingest(&mut self) -> Result<()> {
        if self.ingested.is_some() {
            return Ok(());
        }
        let c = &self.cfg.corpus;
        let load = |path: &Path, label: &str| -> Result<(crate::corpus::Splits, String)> {
            let err = stage_err(Stage::Ingest, path);
            let raw = load_snapshot(path, c.format, label).map_err(err)?;
            let err = stage_err(Stage::Ingest, path);
            let clean = preprocess(&raw, c.min_words).map_err(err)?;
            log::info!(
                "{label}: {} documents, {} after preprocessing",
                raw.n_documents(),
                clean.n_documents()
            );
            let err = stage_err(Stage::Ingest, path);
            let parts = split(&clean, &c.split).map_err(err)?;
            Ok((parts, file_digest(path)?))
        };
        let (c1, d1) = load(&c.c1, &c.t1)?;
        let (c2, d2) = load(&c.c2, &c.t2)?;
        let heldout = self.out(HELDOUT_FILE);
        write_file(&heldout, |w| write_documents(&c2.test, w)).map_err(stage_err(Stage::Ingest, &heldout))?;
        self.ingested = Some(Ingested {
            c1,
            c2,
            input_digests: [d1, d2],
        });
        Ok(())
    }

    /// Write the statistics tables of both training parts under `stats/`.
    pub fn write_stats(&mut self) -> Result<Vec<PathBuf>> {
        self.run_until(Stage::Stats)?;
        let (s1, s2) = self.stats.as_ref().expect("stats computed");
        let mut paths = Vec::new();
        for s in [s1, s2] {
            let f = self.out(&format!("stats/{}.freq.tsv", s.label()));
            write_file(&f, |w| s.write_frequencies(w)).map_err(stage_err(Stage::Stats, &f))?;
            let c = self.out(&format!("stats/{}.cooc.tsv", s.label()));
            write_file(&c, |w| s.write_cooccurrences(w)).map_err(stage_err(Stage::Stats, &c))?;
            paths.extend([f, c]);
        }
        Ok(paths)
    }

    pub fn stats(&mut self) -> Result<()> {
        if self.stats.is_some() {
            return Ok(());
        }
        self.ingest()?;
        let ing = self.ingested.as_ref().expect("ingested");
        let (c1, c2) = (&self.cfg.corpus.c1, &self.cfg.corpus.c2);
        let (s1, s2) = rayon::join(|| count(&ing.c1.train), || count(&ing.c2.train));
        let s1 = s1.map_err(stage_err(Stage::Stats, c1))?;
        let s2 = s2.map_err(stage_err(Stage::Stats, c2))?;
        self.stats = Some((s1, s2));
        Ok(())
    }

    fn embedding_tables(&self) -> Result<(EmbeddingTable, EmbeddingTable)> {
        let t = &self.cfg.tuples;
        let load = |p: &Option<PathBuf>, which: &str, label: &str| -> Result<EmbeddingTable> {
            let p = p
                .as_ref()
                .ok_or_else(|| Error::Config(format!("missing embedding table for snapshot {which}")))?;
            let table = load_table(p).map_err(stage_err(Stage::Tuples, p))?;
            if table.label() != label {
                log::warn!(
                    "{}: table is labelled {:?}, expected {label:?}",
                    p.display(),
                    table.label()
                );
            }
            Ok(table)
        };
        Ok((
            load(&t.emb_t1, "T1", &self.cfg.corpus.t1)?,
            load(&t.emb_t2, "T2", &self.cfg.corpus.t2)?,
        ))
    }

    fn tuples_key(&self) -> Result<String> {
        let ing = self.ingested.as_ref().expect("ingested");
        let mut h = Sha256::new();
        // Input locations don't matter, only their contents.
        let mut corpus = self.cfg.corpus.clone();
        corpus.c1 = PathBuf::new();
        corpus.c2 = PathBuf::new();
        h.update(serde_json::to_string(&corpus).expect("serializes"));
        for d in &ing.input_digests {
            h.update(d.as_bytes());
        }
        h.update(serde_json::to_string(&self.cfg.tuples.method).expect("serializes"));
        let t = &self.cfg.tuples;
        h.update(format!("{} {} {} {}", t.k, t.m, t.min_anchor_freq, t.pool_factor));
        if t.method == Method::Cont {
            for p in [&t.emb_t1, &t.emb_t2].into_iter().flatten() {
                h.update(file_digest(p)?.as_bytes());
            }
        }
        Ok(hex::encode(h.finalize()))
    }

    pub fn build_tuples(&mut self) -> Result<()> {
        if self.tuples.is_some() {
            return Ok(());
        }
        self.stats()?;
        let out = self.out(TUPLES_FILE);
        let key = self.tuples_key().map_err(stage_err(Stage::Tuples, &out))?;
        let cached = self.out(&format!("cache/tuples-{key}.tsv"));
        let set = if cached.is_file() {
            log::info!("reusing cached tuples {}", cached.display());
            let f = fs::File::open(&cached).map_err(|e| Error::io(&cached, e))?;
            read_tuples(&cached, BufReader::new(f)).map_err(stage_err(Stage::Tuples, &cached))?
        } else {
            let set = self.compute_tuples().map_err(stage_err(Stage::Tuples, &out))?;
            write_file(&cached, |w| write_tuples(&set, w)).map_err(stage_err(Stage::Tuples, &cached))?;
            set
        };
        if set.is_empty() {
            return Err(stage_err(Stage::Tuples, &out)(Error::InvalidArgument(
                "no tuples: the snapshots share no pivot with anchors".into(),
            )));
        }
        write_file(&out, |w| write_tuples(&set, w)).map_err(stage_err(Stage::Tuples, &out))?;
        self.tuples = Some(set);
        Ok(())
    }

    fn compute_tuples(&self) -> Result<TupleSet> {
        let (s1, s2) = self.stats.as_ref().expect("stats computed");
        let t = &self.cfg.tuples;
        let acfg = AnchorConfig {
            m: t.m,
            min_freq: t.min_anchor_freq,
        };
        // Each pivot yields at most m^2 tuples, so k pivots always cover k
        // tuples unless anchors run short.
        let budget = match t.method {
            Method::Freq => t.k,
            Method::Div | Method::Cont => t.k.saturating_mul(t.pool_factor),
        };
        let pivots = select_pivots(s1, s2, budget);
        let sets = build_anchor_sets(&pivots, s1, s2, &acfg);
        Ok(match t.method {
            Method::Freq => build_freq_tuples(&pivots, &sets, t.k),
            Method::Div => build_div_tuples(&pivots, &sets, t.k),
            Method::Cont => {
                let (e1, e2) = self.embedding_tables()?;
                let candidates = build_freq_tuples(&pivots, &sets, budget);
                build_cont_tuples(&candidates, &e1, &e2, t.k)?
            }
        })
    }

    fn templates_key(&self) -> Result<String> {
        let tp = &self.cfg.templates;
        let mut h = Sha256::new();
        h.update(self.tuples_key()?.as_bytes());
        let mut tp = tp.clone();
        tp.manual_file = None;
        h.update(serde_json::to_string(&tp).expect("serializes"));
        Ok(hex::encode(h.finalize()))
    }

    fn make_oracle(&self) -> Result<Box<dyn LikelihoodOracle>> {
        let tp = &self.cfg.templates;
        let opts = ExternalOptions {
            timeout: Duration::from_secs(tp.oracle_timeout_secs.max(1)),
            ..ExternalOptions::default()
        };
        Ok(match tp.oracle {
            OracleKind::Ngram => {
                let ing = self.ingested.as_ref().expect("ingested");
                Box::new(NGramLM::train(
                    &[&ing.c1.train, &ing.c2.train],
                    tp.ngram_order,
                    tp.ngram_alpha,
                )?)
            }
            OracleKind::Command => Box::new(ExternalOracle::spawn(&tp.oracle_command, opts)?),
            OracleKind::Socket => Box::new(ExternalOracle::connect_unix(
                tp.oracle_socket.as_deref().expect("validated"),
                opts,
            )?),
        })
    }

    /// The `n` words with the highest combined sentence frequency in the two
    /// training parts, ties broken lexicographically.
    fn frequent_words(&self, n: usize) -> Vec<String> {
        let (s1, s2) = self.stats.as_ref().expect("stats computed");
        let mut totals: std::collections::HashMap<&str, u64> = std::collections::HashMap::new();
        for s in [s1, s2] {
            for (id, f) in s.freq().iter() {
                *totals.entry(s.vocab().word(id)).or_default() += u64::from(f);
            }
        }
        let mut words: Vec<(&str, u64)> = totals.into_iter().collect();
        words.sort_unstable_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        words.into_iter().take(n).map(|(w, _)| w.to_owned()).collect()
    }

    pub fn build_templates(&mut self) -> Result<()> {
        if self.templates.is_some() {
            return Ok(());
        }
        self.build_tuples()?;
        let out = self.out(TEMPLATES_FILE);
        let templates = match self.cfg.templates.source {
            TemplateSource::Manual => {
                let path = self.cfg.templates.manual_file.clone().expect("validated");
                let f = fs::File::open(&path)
                    .map_err(|e| Error::io(&path, e))
                    .map_err(stage_err(Stage::Templates, &path))?;
                read_templates(&path, BufReader::new(f)).map_err(stage_err(Stage::Templates, &path))?
            }
            TemplateSource::Auto => {
                let key = self.templates_key().map_err(stage_err(Stage::Templates, &out))?;
                let cached = self.out(&format!("cache/templates-{key}.txt"));
                if cached.is_file() {
                    log::info!("reusing cached templates {}", cached.display());
                    let f = fs::File::open(&cached).map_err(|e| Error::io(&cached, e))?;
                    read_templates(&cached, BufReader::new(f)).map_err(stage_err(Stage::Templates, &cached))?
                } else {
                    let found = self.search().map_err(stage_err(Stage::Templates, &out))?;
                    write_file(&cached, |w| write_templates(&found, w))
                        .map_err(stage_err(Stage::Templates, &cached))?;
                    found
                }
            }
        };
        if templates.is_empty() {
            return Err(stage_err(Stage::Templates, &out)(Error::Template("no templates".into())));
        }
        write_file(&out, |w| write_templates(&templates, w)).map_err(stage_err(Stage::Templates, &out))?;
        self.templates = Some(templates);
        Ok(())
    }

    fn search(&mut self) -> Result<Vec<Template>> {
        if self.oracle.is_none() {
            self.oracle = Some(self.make_oracle()?);
        }
        let tp = &self.cfg.templates;
        let all = self.tuples.as_ref().expect("tuples built");
        let n = if tp.search_tuples == 0 { all.len() } else { tp.search_tuples.min(all.len()) };
        let subset = TupleSet {
            method: all.method,
            k: n,
            tuples: all.tuples[..n].to_vec(),
        };
        let ing = self.ingested.as_ref().expect("ingested");
        let pairs = select_context_pairs(&subset, &ing.c1.train, &ing.c2.train)?;
        let scfg = SearchConfig {
            beam_width: tp.beam_width,
            max_slot_len: tp.max_slot_len,
            top_n: tp.top_n,
            vocabulary: (tp.search_vocab > 0).then(|| self.frequent_words(tp.search_vocab)),
        };
        let oracle = self.oracle.as_deref().expect("oracle created");
        log::info!(
            "searching templates over {n} tuples, beam width {}, oracle {}",
            tp.beam_width,
            oracle.info().name
        );
        search_templates(&subset, oracle, &pairs, &self.cfg.corpus.t1, &self.cfg.corpus.t2, &scfg)
    }

    pub fn build_prompts(&mut self) -> Result<()> {
        if self.prompts.is_some() {
            return Ok(());
        }
        self.build_templates()?;
        let out = self.out(PROMPTS_FILE);
        let prompts = generate_prompts(
            self.tuples.as_ref().expect("tuples built"),
            self.templates.as_ref().expect("templates built"),
            &self.cfg.corpus.t1,
            &self.cfg.corpus.t2,
        )
        .map_err(stage_err(Stage::Prompts, &out))?;
        write_file(&out, |w| write_prompts(&prompts, w)).map_err(stage_err(Stage::Prompts, &out))?;
        self.prompts = Some(prompts);
        Ok(())
    }

    pub fn mask_config(&self) -> MaskConfig {
        MaskConfig {
            masks_per_prompt: self.cfg.prompts.masks_per_prompt,
            seed: self.cfg.prompts.seed,
            anchors_only: self.cfg.prompts.anchors_only,
        }
    }

    pub fn emit_train(&mut self) -> Result<()> {
        self.build_prompts()?;
        let out = self.out(TRAIN_FILE);
        let cfg = self.mask_config();
        let prompts = self.prompts.as_ref().expect("prompts built");
        let mut result = Ok(0);
        write_file(&out, |w| {
            result = emit_training_file(prompts, &cfg, w);
            Ok(())
        })
        .map_err(stage_err(Stage::EmitTrain, &out))?;
        let n = result.map_err(stage_err(Stage::EmitTrain, &out))?;
        log::info!("wrote {n} training records to {}", out.display());
        Ok(())
    }

    /// Describe the artifacts currently in the output directory and write
    /// the manifest next to them.
    pub fn write_manifest(&self) -> Result<Manifest> {
        let ing = self
            .ingested
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("nothing has been run".into()))?;
        let entry = |name: &str, path: &Path, rel: PathBuf| -> Result<ArtifactEntry> {
            let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
            Ok(ArtifactEntry {
                name: name.to_owned(),
                path: rel,
                sha256: sha256_hex(&bytes),
                bytes: bytes.len() as u64,
            })
        };
        let mut artifacts = Vec::new();
        for name in [TUPLES_FILE, TEMPLATES_FILE, PROMPTS_FILE, TRAIN_FILE, HELDOUT_FILE] {
            let p = self.out(name);
            if p.is_file() {
                artifacts.push(entry(name, &p, PathBuf::from(name))?);
            }
        }
        let c = &self.cfg.corpus;
        let inputs = vec![
            ArtifactEntry {
                name: c.t1.clone(),
                path: c.c1.clone(),
                sha256: ing.input_digests[0].clone(),
                bytes: fs::metadata(&c.c1).map_err(|e| Error::io(&c.c1, e))?.len(),
            },
            ArtifactEntry {
                name: c.t2.clone(),
                path: c.c2.clone(),
                sha256: ing.input_digests[1].clone(),
                bytes: fs::metadata(&c.c2).map_err(|e| Error::io(&c.c2, e))?.len(),
            },
        ];
        let manifest = Manifest {
            config_sha256: self.cfg.digest(),
            inputs,
            seeds: Seeds {
                split: c.split.seed,
                mask: self.cfg.prompts.seed,
            },
            artifacts,
        };
        let path = self.out(MANIFEST_FILE);
        write_file(&path, |w| {
            serde_json::to_writer_pretty(&mut *w, &manifest)?;
            writeln!(w)
        })?;
        Ok(manifest)
    }
}

/// Run every stage and write the manifest.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<Manifest> {
    let mut p = Pipeline::new(cfg.clone())?;
    p.run_until(Stage::EmitTrain)?;
    p.write_manifest()
}
