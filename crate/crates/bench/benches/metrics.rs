use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use capeval_bench::{score_series, tokenized_candidate, tokenized_references, CAPTION};
use capeval_core::baseline::{bleu4, rouge_l, CiderCorpus};
use capeval_core::parse::parse_score;
use capeval_core::prompt::{render, PromptInputs, PromptMode};
use capeval_core::stats::{kendall_tau, pearson, ScorePairSeries, TauVariant};

fn correlations(c: &mut Criterion) {
    let (human, auto) = score_series(1000);
    let series =
        ScorePairSeries::new(human.iter().copied().zip(auto.iter().copied())).unwrap();

    c.bench_function("pearson_n1000", |b| {
        b.iter(|| pearson(black_box(&series)).unwrap())
    });
    c.bench_function("kendall_tau_b_n1000", |b| {
        b.iter(|| kendall_tau(black_box(&series), TauVariant::B).unwrap())
    });
    c.bench_function("kendall_tau_c_n1000", |b| {
        b.iter(|| kendall_tau(black_box(&series), TauVariant::C).unwrap())
    });
}

fn overlap_metrics(c: &mut Criterion) {
    let cand = tokenized_candidate();
    let refs = tokenized_references();
    let corpus = CiderCorpus::from_documents(std::slice::from_ref(&refs)).unwrap();

    c.bench_function("bleu4", |b| {
        b.iter(|| bleu4(black_box(&cand), black_box(&refs)))
    });
    c.bench_function("rouge_l", |b| {
        b.iter(|| rouge_l(black_box(&cand), black_box(&refs)))
    });
    c.bench_function("cider_d_single", |b| {
        b.iter(|| corpus.score(black_box(&cand), black_box(&refs)).unwrap())
    });
}

fn pipeline_pieces(c: &mut Criterion) {
    c.bench_function("render_vanilla_prompt", |b| {
        b.iter(|| {
            render(
                PromptMode::Vanilla,
                PromptInputs {
                    caption: Some(black_box(CAPTION)),
                    ..Default::default()
                },
            )
            .unwrap()
        })
    });
    c.bench_function("parse_score", |b| {
        b.iter(|| parse_score(black_box("The final rating is 85 out of 100.")).unwrap())
    });
}

criterion_group!(benches, correlations, overlap_metrics, pipeline_pieces);
criterion_main!(benches);
