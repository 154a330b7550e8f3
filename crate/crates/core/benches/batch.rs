use std::collections::HashMap;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use groundeval_core::detmatch::{assign, match_boxes};
use groundeval_core::exec::Execution;
use groundeval_core::fixtures::{synth_corpus, FixtureConfig};
use groundeval_core::outparse::ParseOptions;
use groundeval_core::scorer::score_batch;
use groundeval_core::span::boxes_of;
use groundeval_core::taskgen::{build_corpus_tasks, TaskPlan, TemplateBank};
use groundeval_core::textmetrics::levenshtein;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn bench_scoring(c: &mut Criterion) {
    let pages = synth_corpus(1, 200, &FixtureConfig::default(), Execution::Parallel);
    let tasks = build_corpus_tasks(
        &pages,
        &TaskPlan::default(),
        TemplateBank::builtin(),
        1,
        Execution::Parallel,
    )
    .expect("tasks")
    .tasks;
    let predictions: HashMap<String, String> = tasks
        .iter()
        .map(|t| (t.task_id.clone(), t.reference.to_prediction()))
        .collect();
    let options = ParseOptions::default();

    let mut group = c.benchmark_group("score_batch");
    group.sample_size(10);
    group.throughput(Throughput::Elements(tasks.len() as u64));
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| score_batch(&tasks, &predictions, &options, exec).expect("score"))
        });
    }
    group.finish();
}

fn bench_task_building(c: &mut Criterion) {
    let pages = synth_corpus(2, 200, &FixtureConfig::default(), Execution::Parallel);
    let plan = TaskPlan::default();
    let mut group = c.benchmark_group("build_corpus_tasks");
    group.sample_size(10);
    group.throughput(Throughput::Elements(pages.len() as u64));
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| build_corpus_tasks(&pages, &plan, TemplateBank::builtin(), 2, exec).expect("tasks"))
        });
    }
    group.finish();
}

fn bench_fixtures(c: &mut Criterion) {
    let config = FixtureConfig::default();
    let mut group = c.benchmark_group("synth_corpus");
    group.throughput(Throughput::Elements(500));
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| synth_corpus(3, 500, &config, exec))
        });
    }
    group.finish();
}

fn bench_matching(c: &mut Criterion) {
    let pages = synth_corpus(4, 300, &FixtureConfig::default(), Execution::Parallel);
    // Jittered copies of the ground-truth boxes stand in for predictions.
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let pairs: Vec<_> = pages
        .iter()
        .map(|p| {
            let gts = boxes_of(&p.lines);
            let preds: Vec<_> = gts
                .iter()
                .map(|b| {
                    let d = rng.gen_range(0..3);
                    groundeval_core::BBox::new(b.x1() + d, b.y1(), b.x2() + d, b.y2()).expect("box")
                })
                .collect();
            (preds, gts)
        })
        .collect();
    let mut group = c.benchmark_group("match_boxes");
    group.throughput(Throughput::Elements(pairs.len() as u64));
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| exec.map(&pairs, |(p, g)| match_boxes(p, g, 0.5).len()))
        });
    }
    group.finish();

    let weights: Vec<Vec<f64>> = (0..24).map(|_| (0..24).map(|_| rng.gen::<f64>()).collect()).collect();
    c.bench_function("assign_24x24", |b| b.iter(|| assign(&weights, 0.5)));
}

fn bench_levenshtein(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut text = |n: usize| -> String { (0..n).map(|_| rng.gen_range('a'..='h')).collect() };
    let (a, b) = (text(800), text(800));
    c.bench_function("levenshtein_800", |bench| bench.iter(|| levenshtein(&a, &b)));
}

criterion_group!(
    benches,
    bench_scoring,
    bench_task_building,
    bench_fixtures,
    bench_matching,
    bench_levenshtein
);
criterion_main!(benches);
