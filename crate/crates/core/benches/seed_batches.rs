use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use nonstat_opt::harness::{self, ExperimentConfig};
use nonstat_opt::par;

const CONFIG: &str = r#"{
  "environment": {
    "domain": {"center": [0.0, 0.0], "radius": 1.0, "interior_margin": 0.5},
    "family": {"peak_value": 0.3, "curvature": 0.5},
    "drift": {"kind": "sinusoidal", "amplitude": 0.2, "periods": 3.0},
    "noise_amplitude": 0.2,
    "horizon": 4096
  },
  "algorithm": {"stack": "master-base", "smoothness": 1.0, "strong_concavity": 0.5, "kappa_scale": 1e-8}
}"#;

fn regret(config: &ExperimentConfig, seed: u64) -> f64 {
    let run = harness::simulate(config, seed).unwrap();
    harness::dynamic_regret(&run.trace, &run.sequence).unwrap()
}

fn seed_batches(c: &mut Criterion) {
    let config: ExperimentConfig = serde_json::from_str(CONFIG).unwrap();
    let mut group = c.benchmark_group("seed_batches");
    for batch in [8u64, 32] {
        let seeds: Vec<u64> = (0..batch).collect();
        group.bench_with_input(BenchmarkId::new("sequential", batch), &seeds, |b, seeds| {
            b.iter(|| par::map_sequential(seeds, |&s| regret(&config, s)))
        });
        #[cfg(feature = "parallel")]
        group.bench_with_input(BenchmarkId::new("parallel", batch), &seeds, |b, seeds| {
            b.iter(|| par::map_parallel(seeds, |&s| regret(&config, s)))
        });
    }
    group.finish();
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = seed_batches
}
criterion_main!(benches);
