use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use longattn_bench::{default_variants, AttentionCase};

fn attention(c: &mut Criterion) {
    let mut group = c.benchmark_group("attention");
    group.sample_size(10);
    for len in [1024, 2048] {
        for v in default_variants() {
            let case = AttentionCase::new(v.clone(), len, 32, 1, 7).expect("valid case");
            group.throughput(Throughput::Elements(len as u64));
            group.bench_with_input(BenchmarkId::new(v.tag(), len), &case, |b, case| b.iter(|| case.run().expect("attention")));
        }
    }
    group.finish();
}

criterion_group!(benches, attention);
criterion_main!(benches);
