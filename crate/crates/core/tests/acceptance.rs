//! End-to-end acceptance checks. Each criterion prints one `PASS` or `FAIL`
//! line on stderr (bypassing the test harness capture) before asserting.
//!
//! The MNIST criteria need the four IDX files under `data/mnist` at the
//! workspace root, or wherever `PROBEKIT_DATA` points.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, MutexGuard, OnceLock};
use std::time::Instant;

use probekit::entropy::{chain_conditional_entropies, conditional_entropy, entropy, random_chain, Pmf};
use probekit::experiments::{
    checkpoint_file_name, load_mnist, run_scenario, Dataset, Scenario, ScenarioConfig,
    ScenarioOutcome, ScenarioRunner, DATA_ENV, MNIST_EPOCH_STEPS,
};
use probekit::report::Split;
use probekit::tensor::gradcheck::run_suite;
use probekit::tensor::{conv2d, maxpool2d, Padding};
use probekit::Rng;

mod common;

use common::{naive_conv, naive_pool, random};

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn verdict(id: u32, name: &str, ok: bool, detail: String, started: Instant) {
    let status = if ok { "PASS" } else { "FAIL" };
    let secs = started.elapsed().as_secs_f64();
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "criterion {id} ({name}): {status} [{secs:.0}s] {detail}");
    assert!(ok, "criterion {id} ({name}) failed: {detail}");
}

fn mnist_dir() -> PathBuf {
    std::env::var_os(DATA_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"))
}

fn mnist() -> Arc<Dataset> {
    static DATA: OnceLock<Arc<Dataset>> = OnceLock::new();
    DATA.get_or_init(|| {
        let dir = mnist_dir();
        Arc::new(load_mnist(&dir).unwrap_or_else(|e| panic!("MNIST needed at {}: {e}", dir.display())))
    })
    .clone()
}

fn run_on_mnist(config: ScenarioConfig) -> ScenarioOutcome {
    ScenarioRunner::new(config).with_dataset(mnist()).run().unwrap()
}

/// Error rate per layer index at one checkpoint, averaged over runs.
fn curve(outcome: &ScenarioOutcome, step: usize, split: Split) -> Vec<(usize, String, f64)> {
    let mut by_layer: BTreeMap<usize, (String, f64, usize)> = BTreeMap::new();
    for r in outcome.select(step, split) {
        let e = by_layer.entry(r.layer_index).or_insert_with(|| (r.probe_point.clone(), 0.0, 0));
        e.1 += r.error_rate;
        e.2 += 1;
    }
    by_layer.into_iter().map(|(l, (p, sum, n))| (l, p, sum / n as f64)).collect()
}

fn final_model_error(outcome: &ScenarioOutcome) -> f64 {
    let run = &outcome.runs[0];
    match run.diverged_at {
        // A run that blew up has not learned anything usable.
        Some(_) => 1.0,
        None => run.checkpoints.last().unwrap().model_train_error,
    }
}

#[test]
fn criterion_1_untrained_mlp_degrades_with_depth() {
    let _guard = serial();
    let started = Instant::now();
    let mut config = ScenarioConfig::new(Scenario::Untrained32);
    config.runs = 20;
    let outcome = run_scenario(&config).unwrap();
    let c = curve(&outcome, 0, Split::Test);
    assert_eq!(c.len(), 33);
    let first = c[0].2;
    let last = c[32].2;
    let worst_dip = c.windows(2).map(|w| w[0].2 - w[1].2).fold(0.0, f64::max);
    let ok = first < 0.02 && last > 0.40 && worst_dip <= 0.03;
    verdict(
        1,
        "untrained MLP degradation",
        ok,
        format!("layer0 {first:.4} (< 0.02), layer32 {last:.4} (> 0.40), largest dip {worst_dip:.4} (<= 0.03)"),
        started,
    );
}

fn mnist_outcome() -> &'static ScenarioOutcome {
    static OUTCOME: OnceLock<ScenarioOutcome> = OnceLock::new();
    OUTCOME.get_or_init(|| {
        let mut config = ScenarioConfig::new(Scenario::Mnist);
        config.checkpoint_steps = Some(vec![0, 10 * MNIST_EPOCH_STEPS]);
        run_on_mnist(config)
    })
}

#[test]
fn criterion_2_random_convnet_features() {
    let _guard = serial();
    let started = Instant::now();
    let c = curve(mnist_outcome(), 0, Split::Test);
    let input = c[0].2;
    let deeper_min = c[1..].iter().map(|x| x.2).fold(f64::INFINITY, f64::min);
    let (drop_at, drop) = c
        .windows(2)
        .map(|w| (w[1].1.clone(), w[0].2 - w[1].2))
        .fold((String::new(), f64::NEG_INFINITY), |best, x| if x.1 > best.1 { x } else { best });
    let ok = (0.06..=0.10).contains(&input) && deeper_min <= 0.04 && drop_at == "relu1_out";
    verdict(
        2,
        "MNIST random-feature probes",
        ok,
        format!("input {input:.4} (in [0.06, 0.10]), best deeper {deeper_min:.4} (<= 0.04), largest drop {drop:.4} at {drop_at} (relu1_out)"),
        started,
    );
}

#[test]
fn criterion_3_trained_convnet_probes() {
    let _guard = serial();
    let started = Instant::now();
    let c = curve(mnist_outcome(), 10 * MNIST_EPOCH_STEPS, Split::Test);
    let last = c.last().unwrap();
    let rises: Vec<(String, f64)> = c
        .windows(2)
        .filter(|w| w[1].2 > w[0].2)
        .map(|w| (w[1].1.clone(), w[1].2 - w[0].2))
        .collect();
    let ok = last.2 <= 0.02 && rises.len() <= 1 && rises.iter().all(|r| r.1 <= 0.005);
    verdict(
        3,
        "MNIST trained probes",
        ok,
        format!("{} {:.4} (<= 0.02), increases {rises:?} (at most one, <= 0.005)", last.1, last.2),
        started,
    );
}

#[test]
fn criterion_4_guides_rescue_the_128_layer_mlp() {
    let _guard = serial();
    let started = Instant::now();
    let mut baseline = ScenarioConfig::new(Scenario::Deep128);
    baseline.checkpoint_steps = Some(vec![0, 5000]);
    baseline.probe_points = Some(Vec::new());
    let baseline_err = final_model_error(&run_on_mnist(baseline));

    let mut guided = ScenarioConfig::new(Scenario::Deep128Guides);
    guided.checkpoint_steps = Some(vec![0, 5000]);
    let outcome = run_on_mnist(guided);
    let guided_err = final_model_error(&outcome);
    let before = curve(&outcome, 0, Split::Train);
    let after = curve(&outcome, 5000, Split::Train);
    let (weakest_layer, weakest_gain) = before
        .iter()
        .zip(&after)
        .filter(|(b, _)| b.0 >= 16)
        .map(|(b, a)| (b.0, b.2 - a.2))
        .fold((0, f64::INFINITY), |best, x| if x.1 < best.1 { x } else { best });
    let ok = baseline_err > 0.60 && guided_err < 0.30 && weakest_gain >= 0.10;
    verdict(
        4,
        "pathological depth and guides",
        ok,
        format!(
            "baseline train error {baseline_err:.4} (> 0.60), guided {guided_err:.4} (< 0.30), \
             smallest probe gain {weakest_gain:.4} at layer {weakest_layer} (>= 0.10)"
        ),
        started,
    );
}

#[test]
fn criterion_5_bridge_bypasses_lower_layers() {
    let _guard = serial();
    let started = Instant::now();
    let mut config = ScenarioConfig::new(Scenario::Deep128Bridge);
    config.checkpoint_steps = Some(vec![0, 2000]);
    let outcome = run_on_mnist(config);
    let end = curve(&outcome, 2000, Split::Train);
    let mean = |lo: usize, hi: usize| {
        let v: Vec<f64> = end.iter().filter(|x| (lo..=hi).contains(&x.0)).map(|x| x.2).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let gap = mean(1, 63) - mean(64, 128);
    let start: Vec<f64> = curve(&outcome, 0, Split::Train).into_iter().map(|x| x.2).collect();
    let bump_at_input = start[0] < start[1];
    let bump_at_target = start[64] < start[63] && start[64] < start[65];
    let ok = gap >= 0.25 && bump_at_input && bump_at_target;
    verdict(
        5,
        "bridge bypass",
        ok,
        format!(
            "layers 1-63 minus 64-128 {gap:.4} (>= 0.25), step-0 minima at layer 0 {bump_at_input} \
             ({:.4} vs {:.4}) and layer 64 {bump_at_target} ({:.4} vs {:.4}/{:.4})",
            start[0], start[1], start[64], start[63], start[65]
        ),
        started,
    );
}

#[test]
fn criterion_6_conditional_entropy_ordering() {
    let _guard = serial();
    let started = Instant::now();
    let mut rng = Rng::new(2024);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let spec = random_chain(&mut rng, 5, 6);
        let seq = chain_conditional_entropies(&spec).unwrap();
        for w in seq.windows(2) {
            worst = worst.max(w[0] - w[1]);
        }
    }
    let h = |p: Vec<f64>| entropy(&Pmf::new(p).unwrap());
    let bsc = conditional_entropy(&[vec![0.45, 0.05], vec![0.05, 0.45]]).unwrap();
    let examples = [
        (h(vec![1.0, 0.0, 0.0]), 0.0),
        (h(vec![0.25; 4]), 1.386294),
        (h(vec![0.5, 0.25, 0.25]), 1.039721),
        (bsc, 0.325083),
    ];
    let example_err = examples.iter().map(|(got, want)| (got - want).abs()).fold(0.0, f64::max);
    let ok = worst <= 1e-9 && example_err <= 1e-6;
    verdict(
        6,
        "conditional entropy ordering",
        ok,
        format!("largest decrease over 1000 chains {worst:.2e} (<= 1e-9), worst example error {example_err:.2e} (<= 1e-6)"),
        started,
    );
}

#[test]
fn criterion_7_probes_leave_training_untouched() {
    let _guard = serial();
    let started = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let steps = vec![0, 100, 200];
    let configure = |name: &str, probed: bool| {
        let mut c = ScenarioConfig::new(Scenario::Mnist);
        c.seed = 17;
        c.train_steps = 200;
        c.checkpoint_steps = Some(steps.clone());
        c.model_eval_rows = 1000;
        c.probe.validation_size = 1000;
        c.probe_budget.max_train_rows = 2000;
        c.output_dir = Some(dir.path().join(name));
        if !probed {
            c.probe_points = Some(Vec::new());
        }
        c
    };
    let with = run_on_mnist(configure("with", true));
    let without = run_on_mnist(configure("without", false));
    let mut identical = with.records.len() == 2 * 13 * steps.len() && without.records.is_empty();
    identical &= with.runs[0].losses == without.runs[0].losses;
    for (a, b) in with.runs[0].checkpoints.iter().zip(&without.runs[0].checkpoints) {
        identical &= a.parameter_checksum == b.parameter_checksum;
    }
    for &step in &steps {
        let name = checkpoint_file_name(Scenario::Mnist, 0, step);
        let a = fs::read(dir.path().join("with/checkpoints").join(&name)).unwrap();
        let b = fs::read(dir.path().join("without/checkpoints").join(&name)).unwrap();
        identical &= a == b;
    }
    verdict(
        7,
        "probe isolation",
        identical,
        format!(
            "{} probe records, {} losses and {} checkpoint files compared byte for byte",
            with.records.len(),
            with.runs[0].losses.len(),
            steps.len()
        ),
        started,
    );
}

#[test]
fn criterion_8_numerical_suite() {
    let _guard = serial();
    let started = Instant::now();
    let reports = run_suite(0, 100).unwrap();
    let failing: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.op.as_str()).collect();
    let mut rng = Rng::new(8);
    let mut mismatches = 0;
    let mut compared = 0;
    for h in 1..=8 {
        for w in [1, 3, 5, 8] {
            for cin in [1, 2, 4] {
                for k in 1..=3 {
                    for s in 1..=2 {
                        for padding in [Padding::Same, Padding::Valid] {
                            let x = random(&mut rng, &[2, h, w, cin]);
                            let kern = random(&mut rng, &[k, k, cin, 3]);
                            let b = random(&mut rng, &[3]);
                            let got = conv2d(&x, &kern, &b, s, padding);
                            compared += 1;
                            match (got, naive_conv(&x, &kern, &b, s, padding)) {
                                (Ok(g), Some(want)) => {
                                    let close = g.shape() == want.shape()
                                        && g.data().iter().zip(want.data()).all(|(a, b)| (a - b).abs() <= 1e-5);
                                    mismatches += usize::from(!close);
                                }
                                (Err(_), None) => {}
                                _ => mismatches += 1,
                            }
                        }
                        if k <= h && k <= w {
                            let x = random(&mut rng, &[2, h, w, cin]);
                            let got = maxpool2d(&x, k, s).unwrap();
                            compared += 1;
                            mismatches += usize::from(got.data() != naive_pool(&x, k, s).data());
                        }
                    }
                }
            }
        }
    }
    let ok = failing.is_empty() && reports.len() >= 8 && mismatches == 0;
    let worst = reports.iter().map(|r| r.max_rel_error / r.threshold).fold(0.0, f64::max);
    verdict(
        8,
        "numerical suite",
        ok,
        format!(
            "{} ops checked, failing {failing:?}, worst error/threshold {worst:.3}; {mismatches} of {compared} conv/pool oracle mismatches",
            reports.len()
        ),
        started,
    );
}

