use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use dig_bench::BenchInputs;

fn attention_kernels(c: &mut Criterion) {
    let mut group = c.benchmark_group("attention");
    group.sample_size(10);
    for t in [256usize, 1024, 4096] {
        let x = BenchInputs::random(t, 64, t as u64).to_f32();
        group.bench_with_input(BenchmarkId::new("softmax", t), &x, |b, x| b.iter(|| black_box(x.softmax())));
        group.bench_with_input(BenchmarkId::new("gla_chunked_64", t), &x, |b, x| {
            b.iter(|| black_box(x.gla_chunked(64)))
        });
    }
    group.finish();
}

criterion_group!(benches, attention_kernels);
criterion_main!(benches);
