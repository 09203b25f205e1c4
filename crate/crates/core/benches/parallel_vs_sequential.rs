use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use latentmotion::dataio::{generate_synthetic, SyntheticSpec};
use latentmotion::latent_model::{Generator, ModelConfig};
use latentmotion::metrics::{eval_acd, Extractor};
use latentmotion::parallel;

fn model() -> Generator {
    let cfg = ModelConfig {
        layers: 4,
        dim: 16,
        train_window_t: 10,
        ..ModelConfig::default()
    };
    Generator::new(&cfg, 0).unwrap()
}

fn bench(c: &mut Criterion) {
    let g = model();
    let samples = g.generate(64, 100, 1).unwrap();
    let ex = Extractor::parse("random-projection-32").unwrap();
    let ds = generate_synthetic(&SyntheticSpec {
        num_frames: 20_000,
        ..SyntheticSpec::default()
    })
    .unwrap();

    let mut group = c.benchmark_group("parallel_vs_sequential");
    group.sample_size(10);
    for (label, on) in [("parallel", true), ("sequential", false)] {
        parallel::set_enabled(on);
        group.bench_function(BenchmarkId::new("generate_64x100", label), |b| {
            b.iter(|| g.generate(64, 100, 2).unwrap())
        });
        group.bench_function(BenchmarkId::new("acd_64x100", label), |b| {
            b.iter(|| eval_acd(&samples, &ex).unwrap())
        });
        group.bench_function(BenchmarkId::new("pca_20000", label), |b| {
            b.iter(|| latentmotion::motion_transfer::fit_motion_basis(&ds, 8).unwrap())
        });
    }
    parallel::set_enabled(true);
    group.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
