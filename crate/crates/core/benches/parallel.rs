//! Sequential vs rayon fan-out over patients and bootstrap rounds.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use medrec_core::cohort::synthetic::{generate, SyntheticConfig};
use medrec_core::config::HyperParams;
use medrec_core::evaluation::{score_patient, EvalOptions};
use medrec_core::exec::{map_par, map_seq};
use medrec_core::harness::Dataset;
use medrec_core::model::Model;
use medrec_core::train::{predict_outcomes, prepare};

fn bench(c: &mut Criterion) {
    let hp = HyperParams {
        embed_dim: 32,
        ..HyperParams::default()
    };
    let data = generate(&SyntheticConfig { patients: 64, ..SyntheticConfig::default() }, 1).unwrap();
    let ds = Dataset::from_synthetic(&data, &hp).unwrap();
    let model = Model::new(&ds.cohort.vocab, &ds.relations, &hp).unwrap();
    let patients = prepare(&model, &ds.cohort, &ds.relations).unwrap();

    let mut g = c.benchmark_group("predict_patients");
    g.sample_size(10);
    g.bench_function(BenchmarkId::new("sequential", patients.len()), |b| {
        b.iter(|| map_seq(&patients, |p| model.predict(&p.graphs).unwrap()))
    });
    g.bench_function(BenchmarkId::new("parallel", patients.len()), |b| {
        b.iter(|| map_par(&patients, |p| model.predict(&p.graphs).unwrap()))
    });
    g.finish();

    let outcomes = predict_outcomes(&model, &patients).unwrap();
    let opts = EvalOptions::from_hyper(&hp);
    let ddi = &ds.relations.ddi;
    let mut g = c.benchmark_group("score_patients");
    g.bench_function("sequential", |b| {
        b.iter(|| map_seq(&outcomes, |o| score_patient(o, ddi, &opts).unwrap()))
    });
    g.bench_function("parallel", |b| {
        b.iter(|| map_par(&outcomes, |o| score_patient(o, ddi, &opts).unwrap()))
    });
    g.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
