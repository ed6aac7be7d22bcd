use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use probekit::experiments::{run_scenario, Scenario, ScenarioConfig};

fn small_untrained(workers: usize) -> ScenarioConfig {
    let mut c = ScenarioConfig::new(Scenario::Untrained32);
    c.runs = 4;
    c.samples = 2000;
    c.workers = workers;
    c.probe.max_epochs = 10;
    c.probe_points = Some(["layer0", "layer8", "layer16", "layer24", "layer32"].map(String::from).to_vec());
    c
}

fn bench_workers(c: &mut Criterion) {
    let threads = std::thread::available_parallelism().map_or(2, |n| n.get().max(2));
    let mut group = c.benchmark_group("untrained32_suite");
    group.sample_size(10);
    for workers in [1, threads] {
        let config = small_untrained(workers);
        group.bench_with_input(BenchmarkId::new("workers", workers), &config, |b, config| {
            b.iter(|| run_scenario(config).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench_workers);
criterion_main!(benches);
