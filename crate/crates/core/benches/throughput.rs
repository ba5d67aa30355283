//! Sequential vs data-parallel throughput of the three hot paths:
//! dataset generation, one batch gradient step and test-set prediction.

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use tailquant::config::RunConfig;
use tailquant::datagen::{generate_dataset, normalize};
use tailquant::exec::Exec;
use tailquant::experiment::predict_pooled;
use tailquant::model::{BackboneConfig, HeadKind, Model};
use tailquant::tensor::AdamState;
use tailquant::train::train_step;

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn run() -> RunConfig {
    let mut run = RunConfig::default();
    run.model = BackboneConfig {
        blocks: 1,
        filters: 8,
        head_kernel: 3,
        ..BackboneConfig::default()
    };
    run
}

fn generation(c: &mut Criterion) {
    let run = run();
    let mut g = c.benchmark_group("generate_64");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(name, |b| b.iter(|| generate_dataset(&run.world, 64, exec).unwrap()));
    }
    g.finish();
}

fn batch_gradient(c: &mut Criterion) {
    let run = run();
    let data = generate_dataset(&run.world, 40, Exec::Parallel).unwrap();
    let samples = normalize(&data.train()[..16], &data.stats).unwrap();
    let batch: Vec<_> = samples.iter().collect();
    let seeds = vec![Some(1u64); batch.len()];
    let model = Model::build(run.model.clone(), HeadKind::IncrementSeparate, run.levels.clone(), 1).unwrap();
    let mut g = c.benchmark_group("train_step_16");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(name, |b| {
            b.iter_batched(
                || (model.clone(), AdamState::new(run.train.adam, &model.params)),
                |(mut m, mut state)| train_step(&mut m, &batch, &run.train, &mut state, &seeds, exec).unwrap(),
                BatchSize::LargeInput,
            )
        });
    }
    g.finish();
}

fn prediction(c: &mut Criterion) {
    let run = run();
    let data = generate_dataset(&run.world, 40, Exec::Parallel).unwrap();
    let model = Model::build(run.model.clone(), HeadKind::IncrementSeparate, run.levels.clone(), 1).unwrap();
    let test = data.test();
    let mut g = c.benchmark_group("predict_test_split");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(name, |b| b.iter(|| predict_pooled(&model, &test, &data.stats, exec).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, generation, batch_gradient, prediction);
criterion_main!(benches);
