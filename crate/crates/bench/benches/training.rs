use criterion::{criterion_group, criterion_main, Criterion};
use discond::objective::train_step;
use discond_bench::{binary_batch, condsprites_model, step_fixture, weights};

fn step(c: &mut Criterion) {
    let w = weights();
    let mut group = c.benchmark_group("train_step_b64");
    group.sample_size(10);
    for extent in [32, 64] {
        let mut f = step_fixture(extent, 64);
        let mut iter = 0;
        group.bench_function(format!("exact_e{extent}"), |b| {
            b.iter(|| {
                iter += 1;
                train_step(&mut f.model, &mut f.adam, &f.x, &w, iter, &f.noise).unwrap()
            })
        });
    }
    group.finish();
}

fn encode(c: &mut Criterion) {
    let model = condsprites_model(64, 1);
    let x = binary_batch(256, 64, 4);
    let mut group = c.benchmark_group("encode_means");
    group.sample_size(10);
    group.bench_function("b256_e64", |b| b.iter(|| model.encode_means(&x).unwrap()));
    group.finish();
}

criterion_group!(benches, step, encode);
criterion_main!(benches);
