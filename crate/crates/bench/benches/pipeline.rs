use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use shiftprompt::fixtures::planted_shift;
use shiftprompt::templates::{search_templates, select_context_pairs, SearchConfig};
use shiftprompt::tuples::{build_anchor_sets, build_freq_tuples, select_pivots, AnchorConfig};
use shiftprompt::{count, NGramLM, Snapshot, TupleSet};

fn snapshots(copies: usize) -> (Snapshot, Snapshot) {
    let f = planted_shift();
    let grow = |docs: &[String]| -> Vec<String> {
        (0..copies)
            .flat_map(|i| docs.iter().map(move |d| format!("copy{i} {d}")))
            .collect()
    };
    (
        Snapshot::from_documents(f.t1, &grow(&f.c1)),
        Snapshot::from_documents(f.t2, &grow(&f.c2)),
    )
}

fn counting(c: &mut Criterion) {
    let mut g = c.benchmark_group("count");
    for copies in [1, 10, 50] {
        let (c1, _) = snapshots(copies);
        g.bench_with_input(BenchmarkId::from_parameter(c1.n_sentences()), &c1, |b, s| {
            b.iter(|| count(s).unwrap())
        });
    }
    g.finish();
}

fn tuples(c: &mut Criterion) {
    let (c1, c2) = snapshots(10);
    let (s1, s2) = (count(&c1).unwrap(), count(&c2).unwrap());
    c.bench_function("anchors+freq tuples", |b| {
        b.iter(|| {
            let pivots = select_pivots(&s1, &s2, 500);
            let sets = build_anchor_sets(&pivots, &s1, &s2, &AnchorConfig::default());
            build_freq_tuples(&pivots, &sets, 500)
        })
    });
}

fn beam(c: &mut Criterion) {
    let (c1, c2) = snapshots(1);
    let (s1, s2) = (count(&c1).unwrap(), count(&c2).unwrap());
    let pivots = select_pivots(&s1, &s2, 50);
    let sets = build_anchor_sets(&pivots, &s1, &s2, &AnchorConfig::default());
    let all = build_freq_tuples(&pivots, &sets, 50);
    let tuples = TupleSet {
        method: all.method,
        k: 5,
        tuples: all.tuples[..5].to_vec(),
    };
    let pairs = select_context_pairs(&tuples, &c1, &c2).unwrap();
    let lm = NGramLM::train(&[&c1, &c2], 3, 0.1).unwrap();
    let vocab: Vec<String> = ["mask", "hide", "d000", "d001", "d002", "d003", "d004", "d005"]
        .map(String::from)
        .to_vec();
    let mut g = c.benchmark_group("beam search");
    g.sample_size(10);
    for width in [1, 8, 32] {
        let cfg = SearchConfig {
            beam_width: width,
            max_slot_len: 3,
            top_n: 5,
            vocabulary: Some(vocab.clone()),
        };
        g.bench_with_input(BenchmarkId::from_parameter(width), &cfg, |b, cfg| {
            b.iter(|| search_templates(&tuples, &lm, &pairs, "2010", "2020", cfg).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, counting, tuples, beam);
criterion_main!(benches);
