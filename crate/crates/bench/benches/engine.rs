use std::hint::black_box;

use adaptcat_bench::{answers, bank};
use adaptcat_core::engine::NextStep;
use adaptcat_core::estimate::{eap, Bounds, Prior, QuadratureGrid};
use adaptcat_core::irt::{category_probabilities, item_information, ScoredPattern};
use adaptcat_core::select::mfi_select;
use adaptcat_core::{Engine, Model, StudyConfig};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn probabilities(c: &mut Criterion) {
    let mut g = c.benchmark_group("probabilities");
    for model in [Model::TwoPl, Model::ThreePl, Model::Grm] {
        let item = bank(model, 1).items.remove(0);
        g.bench_function(BenchmarkId::new("categories", model), |b| {
            b.iter(|| category_probabilities(black_box(&item), black_box(0.3)))
        });
        g.bench_function(BenchmarkId::new("information", model), |b| {
            b.iter(|| item_information(black_box(&item), black_box(0.3)))
        });
    }
    g.finish();
}

fn estimation(c: &mut Criterion) {
    let mut g = c.benchmark_group("eap");
    let grid = QuadratureGrid::default();
    for n in [5, 15, 40] {
        let bank = bank(Model::TwoPl, n);
        let responses = answers(&bank, n, 0.5);
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| {
                let pattern = ScoredPattern::new(&bank.items, &responses).unwrap();
                eap(&pattern, &Prior::default(), &grid, &Bounds::default())
            })
        });
    }
    g.finish();
}

fn selection(c: &mut Criterion) {
    let bank = bank(Model::TwoPl, 1000);
    let administered: Vec<String> = bank.items.iter().take(20).map(|i| i.id.clone()).collect();
    c.bench_function("mfi/1000", |b| {
        b.iter(|| mfi_select(black_box(&bank.items), &administered, black_box(0.4)))
    });
}

/// One response plus the next selection, as served per request.
fn session_step(c: &mut Criterion) {
    let engine = Engine::new(StudyConfig::new("bench", Model::TwoPl, 30, 30, 0.01), bank(Model::TwoPl, 1000)).unwrap();
    let mut ledger = engine.new_ledger();
    let mut state = engine.start_session("s", 1, 0);
    engine.begin(&mut state, 0).unwrap();
    for _ in 0..10 {
        let NextStep::Item(id) = engine.next_item(&mut state, Some(&ledger), 0).unwrap() else { unreachable!() };
        let r = adaptcat_core::Response::new(id, 1);
        engine.submit_response(&mut state, r, Some(&mut ledger), 0).unwrap();
    }
    let NextStep::Item(id) = engine.next_item(&mut state, Some(&ledger), 0).unwrap() else { unreachable!() };
    c.bench_function("session_step/1000", |b| {
        b.iter(|| {
            let mut s = state.clone();
            let r = adaptcat_core::Response::new(id.clone(), 0);
            engine.submit_response(&mut s, r, None, 1).unwrap();
            engine.next_item(&mut s, None, 1).unwrap()
        })
    });
}

criterion_group!(benches, probabilities, estimation, selection, session_step);
criterion_main!(benches);
