use std::fs;
use std::path::Path;

use shiftprompt::embeddings::save_table;
use shiftprompt::fixtures::planted_shift;
use shiftprompt::lm_oracle::{ExternalOptions, ExternalOracle, LikelihoodOracle};
use shiftprompt::pipeline::{Pipeline, Stage, TemplateSource, MANIFEST_FILE, TUPLES_FILE};
use shiftprompt::prompts::TrainingRecord;
use shiftprompt::{run_pipeline, Error, Method, PipelineConfig};

const ROW1: &str = "<w> is associated with <u> in <T1>, whereas it is associated with <v> in <T2>.";

fn config(dir: &Path) -> PipelineConfig {
    let f = planted_shift();
    let (c1, c2) = f.write(dir).unwrap();
    let manual = dir.join("manual.txt");
    fs::write(&manual, format!("{ROW1}\n")).unwrap();
    let mut cfg = PipelineConfig::default();
    cfg.corpus.c1 = c1;
    cfg.corpus.c2 = c2;
    cfg.corpus.t1 = f.t1.into();
    cfg.corpus.t2 = f.t2.into();
    cfg.templates.manual_file = Some(manual);
    cfg.output = dir.join("out");
    cfg
}

#[test]
fn manual_freq_run_writes_five_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    let m = run_pipeline(&cfg).unwrap();
    assert_eq!(m.artifacts.len(), 5);
    for a in &m.artifacts {
        let bytes = fs::read(cfg.output.join(&a.path)).unwrap();
        assert_eq!(bytes.len() as u64, a.bytes, "{}", a.name);
        assert!(a.bytes > 0, "{} is empty", a.name);
    }
    assert!(cfg.output.join(MANIFEST_FILE).is_file());

    let prompts = fs::read_to_string(cfg.output.join("prompts.txt")).unwrap();
    assert!(prompts.lines().any(|l| l.contains(
        "mask is associated with hide in 2010, whereas it is associated with vaccine in 2020."
    )));
    let train = fs::read_to_string(cfg.output.join("train.jsonl")).unwrap();
    for line in train.lines() {
        let r: TrainingRecord = serde_json::from_str(line).unwrap();
        assert_eq!(r.text.split_whitespace().nth(r.mask_index), Some(r.label.as_str()));
    }
}

#[test]
fn cont_without_tables_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path());
    cfg.tuples.method = Method::Cont;
    let e = run_pipeline(&cfg).unwrap_err();
    assert!(matches!(e, Error::Config(_)));
    assert!(e.to_string().contains("missing embedding table for snapshot T1"), "{e}");
}

#[test]
fn cont_with_tables_ranks_the_planted_tuple_first() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path());
    let (e1, e2) = planted_shift().orthogonal_embeddings();
    let (p1, p2) = (dir.path().join("t1.emb"), dir.path().join("t2.emb"));
    save_table(&e1, &p1).unwrap();
    save_table(&e2, &p2).unwrap();
    cfg.tuples.method = Method::Cont;
    cfg.tuples.emb_t1 = Some(p1);
    cfg.tuples.emb_t2 = Some(p2);
    run_pipeline(&cfg).unwrap();
    let tuples = fs::read_to_string(cfg.output.join(TUPLES_FILE)).unwrap();
    let first: Vec<&str> = tuples.lines().next().unwrap().split('\t').collect();
    assert_eq!(&first[..4], ["1", "mask", "hide", "vaccine"]);
    assert_eq!(first[4].parse::<f64>().unwrap(), 2.0);
    assert_eq!(first[5], "cont");
}

#[test]
fn stage_errors_name_stage_and_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path());
    let missing = dir.path().join("nope.txt");
    cfg.corpus.c1 = missing.clone();
    match run_pipeline(&cfg).unwrap_err() {
        Error::Stage { stage, artifact, .. } => {
            assert_eq!(stage, "ingest");
            assert_eq!(artifact, missing);
        }
        e => panic!("unexpected {e}"),
    }

    let mut cfg = config(dir.path());
    let bad = dir.path().join("bad.txt");
    fs::write(&bad, "<w> and <x>\n").unwrap();
    cfg.templates.manual_file = Some(bad.clone());
    match run_pipeline(&cfg).unwrap_err() {
        Error::Stage { stage, artifact, .. } => {
            assert_eq!(stage, "templates");
            assert_eq!(artifact, bad);
        }
        e => panic!("unexpected {e}"),
    }
}

#[test]
fn preprocessing_that_empties_a_corpus_fails() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path());
    cfg.corpus.min_words = 1000;
    let e = run_pipeline(&cfg).unwrap_err();
    assert!(e.to_string().contains("empty corpus after preprocessing"), "{e}");
}

#[test]
fn cached_tuples_are_reused() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    run_pipeline(&cfg).unwrap();
    let cache = cfg.output.join("cache");
    let entries: Vec<_> = fs::read_dir(&cache).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(entries.len(), 1);
    // Rewrite the cached set: a resumed run must pick it up unchanged.
    fs::write(&entries[0], "1\tmask\thide\tvaccine\t2.0e1\tfreq\n").unwrap();
    run_pipeline(&cfg).unwrap();
    let tuples = fs::read_to_string(cfg.output.join(TUPLES_FILE)).unwrap();
    assert_eq!(tuples.lines().count(), 1);

    // A different budget is a different key.
    let mut other = cfg.clone();
    other.tuples.k = 3;
    run_pipeline(&other).unwrap();
    assert_eq!(fs::read_dir(&cache).unwrap().count(), 2);
}

#[test]
fn manifest_digest_tracks_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    let a = run_pipeline(&cfg).unwrap();
    let mut changed = cfg.clone();
    changed.prompts.seed = 9;
    changed.output = dir.path().join("out2");
    let b = run_pipeline(&changed).unwrap();
    assert_ne!(a.config_sha256, b.config_sha256);
    assert_eq!(a.artifact("tuples.tsv"), b.artifact("tuples.tsv"));
    assert_ne!(a.artifact("train.jsonl"), b.artifact("train.jsonl"));
}

#[test]
fn stages_can_run_one_at_a_time() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    let mut p = Pipeline::new(cfg.clone()).unwrap();
    p.run_until(Stage::Tuples).unwrap();
    assert!(cfg.output.join(TUPLES_FILE).is_file());
    assert!(!cfg.output.join("prompts.txt").exists());
    let written = p.write_stats().unwrap();
    assert_eq!(written.len(), 4);
    let freq = fs::read_to_string(&written[0]).unwrap();
    assert!(freq.lines().any(|l| l.starts_with("mask\t")));
}

/// A peer in a subprocess that scores every candidate by its length.
const PEER: &str = r#"
import json, sys
print(json.dumps({"proto": 1, "name": "length", "max_context": None}), flush=True)
for line in sys.stdin:
    req = json.loads(line)
    out = [-0.5 * (1 + len(c)) for c in req["candidates"]]
    print(json.dumps({"id": req["id"], "logprobs": out}), flush=True)
"#;

fn python() -> Option<String> {
    ["python3", "python"].into_iter().map(String::from).find(|p| {
        std::process::Command::new(p)
            .arg("--version")
            .output()
            .is_ok_and(|o| o.status.success())
    })
}

#[test]
fn spawned_peer_drives_template_search() {
    let Some(py) = python() else {
        eprintln!("skipping: no python interpreter");
        return;
    };
    let dir = tempfile::tempdir().unwrap();
    let script = dir.path().join("peer.py");
    fs::write(&script, PEER).unwrap();
    let command = vec![py, script.display().to_string()];

    let oracle = ExternalOracle::spawn(&command, ExternalOptions::default()).unwrap();
    assert_eq!(oracle.info().name, "length");
    let lp = oracle
        .logprob(&["a".into()], &[vec![], vec!["x".into(), "y".into()]])
        .unwrap();
    assert_eq!(lp, vec![-0.5, -1.5]);
    drop(oracle);

    let mut cfg = config(dir.path());
    cfg.templates.source = TemplateSource::Auto;
    cfg.templates.oracle = shiftprompt::pipeline::OracleKind::Command;
    cfg.templates.oracle_command = command;
    cfg.templates.beam_width = 4;
    cfg.templates.search_tuples = 2;
    cfg.templates.search_vocab = 5;
    run_pipeline(&cfg).unwrap();
    // Every extension costs more than closing, so all runs stay empty.
    let templates = fs::read_to_string(cfg.output.join("templates.txt")).unwrap();
    assert_eq!(templates.lines().next().unwrap().split('\t').next(), Some("<u> <T1> <v> <T2>"));
}
