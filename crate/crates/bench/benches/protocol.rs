use std::hint::black_box;

use afafed_bench::{examples, small_sim};
use afafed_core::model::minibatch_gradient;
use afafed_core::network::{EventKind, EventQueue};
use afafed_core::{LossModel, ModelVector, Simulation};
use criterion::{criterion_group, criterion_main, BatchSize, Criterion};

fn gradient(c: &mut Criterion) {
    let model = LossModel::quadratic(64);
    let batch = examples(32, 64, 1);
    let w = ModelVector::zeros(64);
    c.bench_function("minibatch_gradient_d64_b32", |b| {
        b.iter(|| minibatch_gradient(&model, black_box(&w), black_box(&batch)).unwrap())
    });
}

fn queue(c: &mut Criterion) {
    c.bench_function("event_queue_10k", |b| {
        b.iter(|| {
            let mut q = EventQueue::new();
            for i in 0..10_000u64 {
                let t = ((i * 7919) % 10_000) as f64;
                q.schedule(t, EventKind::TimerExpiry { k: 0, epoch: i }).unwrap();
            }
            while let Some(e) = q.pop() {
                black_box(e);
            }
        })
    });
}

fn simulation(c: &mut Criterion) {
    let params = small_sim(200);
    c.bench_function("simulate_small_200", |b| {
        b.iter_batched(
            || Simulation::new(params.clone()).unwrap(),
            |mut sim| sim.run(&mut |_| Ok(())).unwrap(),
            BatchSize::SmallInput,
        )
    });
}

criterion_group!(benches, gradient, queue, simulation);
criterion_main!(benches);
