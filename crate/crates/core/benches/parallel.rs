//! Single-thread pool against the full pool on the data-parallel hot paths.
//! Build without default features to time the sequential fallback alone.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use cvgfk::checks;
use cvgfk::scene::{generate_dataset, DatasetSpec, SceneFamily, NUM_CLASSES};
use cvgfk::segmodel::{evaluate, SegModel};

fn pools() -> Vec<(String, Option<usize>)> {
    let single = ("1-thread".to_string(), Some(1));
    #[cfg(feature = "parallel")]
    return vec![single, (format!("full-pool-{}", rayon::current_num_threads()), None)];
    #[cfg(not(feature = "parallel"))]
    vec![single]
}

fn run_in<R: Send>(threads: Option<usize>, f: impl FnOnce() -> R + Send) -> R {
    #[cfg(feature = "parallel")]
    {
        let mut b = rayon::ThreadPoolBuilder::new();
        if let Some(n) = threads {
            b = b.num_threads(n);
        }
        b.build().expect("thread pool").install(f)
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = threads;
        f()
    }
}

fn bench(c: &mut Criterion) {
    let family = SceneFamily::default();
    let spec = DatasetSpec {
        n_source: 24,
        n_source_test: 0,
        n_target: 0,
        n_target_test: 0,
        paired: false,
    };
    let dataset = generate_dataset(&family, &spec, 1).expect("dataset");
    let views = &dataset.split("source").expect("split").views;
    let (w, h) = family.resolution;
    let mut model = SegModel::zeros(w, h, NUM_CLASSES, 2, 8);
    for (i, t) in model.theta.iter_mut().enumerate() {
        *t = ((i * 37 % 101) as f64 - 50.0) / 500.0;
    }
    let cond = vec![0.1; 8];

    let mut group = c.benchmark_group("parallel");
    group.sample_size(10);
    for (name, threads) in pools() {
        group.bench_function(BenchmarkId::new("evaluate_24_views", &name), |b| {
            b.iter(|| run_in(threads, || evaluate(&model, views, &cond).expect("evaluate")))
        });
        group.bench_function(BenchmarkId::new("kernel_oracle_8_pairs", &name), |b| {
            b.iter(|| run_in(threads, || checks::kernel_oracle(8, 48, 12, 401, 3).expect("oracle")))
        });
        group.bench_function(BenchmarkId::new("metric_bounds_2000", &name), |b| {
            b.iter(|| run_in(threads, || checks::metric_bounds(2000, 5).expect("bounds")))
        });
    }
    group.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
