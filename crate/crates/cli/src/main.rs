//! `probekit` command-line driver.
//!
//! Exit codes: 0 success, 1 other failures (including a failed gradient
//! check), 2 missing or invalid config/data, 3 violated invariant.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use probekit::entropy::{builtin_chains, chain_conditional_entropies, entropy, ChainSpec, Pmf};
use probekit::experiments::{load_checkpoint, Scenario, ScenarioConfig, ScenarioRunner};
use probekit::report::{aggregate_mean, read_records, render_layer_curve, svg_file_name, write_records, PlotOptions, Split};
use probekit::tensor::gradcheck;

#[derive(Parser)]
#[command(name = "probekit", version, about = "Train models and probe their intermediate layers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a scenario's model, probe every checkpoint and write the results
    Run(RunArgs),
    /// Probe a saved checkpoint
    Probe(ProbeArgs),
    /// Re-render charts and print per-layer means from a records file
    Report(ReportArgs),
    /// Print H[Y|A_k] along built-in or user-supplied Markov chains
    EntropyDemo(EntropyArgs),
    /// Compare analytic gradients of every primitive with finite differences
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct ScenarioArgs {
    /// Scenario name (untrained32, mnist, deep128, deep128-guides, deep128-bridge)
    #[arg(long)]
    scenario: Option<String>,
    /// JSON scenario config; flags given on the command line take precedence
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    runs: Option<usize>,
    /// Model training steps
    #[arg(long)]
    steps: Option<usize>,
    /// Output directory [default: out/<scenario>]
    #[arg(long)]
    out: Option<PathBuf>,
    /// Split drawn in the charts
    #[arg(long, value_parser = parse_split)]
    split: Option<Split>,
    /// Worker threads (1 runs everything on one thread)
    #[arg(long)]
    workers: Option<usize>,
    /// MNIST directory [default: $PROBEKIT_DATA, then data/mnist]
    #[arg(long)]
    data: Option<PathBuf>,
    /// Only report progress at the end
    #[arg(long, short)]
    quiet: bool,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
}

#[derive(Args)]
struct ProbeArgs {
    /// Checkpoint file written by `run`
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    scenario: ScenarioArgs,
}

#[derive(Args)]
struct ReportArgs {
    /// records.csv written by `run` or `probe`
    #[arg(long)]
    records: PathBuf,
    /// Directory for the charts [default: next to the records]
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_parser = parse_split)]
    split: Option<Split>,
}

#[derive(Args)]
struct EntropyArgs {
    /// JSON chain spec with `marginal`, `emission` and `transitions`
    #[arg(long)]
    chain: Vec<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Random points per primitive
    #[arg(long, default_value_t = 100)]
    points: usize,
}

fn parse_split(s: &str) -> Result<Split, String> {
    s.parse().map_err(|e: probekit::Error| e.to_string())
}

fn load_config(args: &ScenarioArgs, fallback: Option<Scenario>) -> Result<ScenarioConfig> {
    let mut json = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| probekit::Error::File {
                path: path.clone(),
                source: e,
            });
            let text = match text {
                Err(probekit::Error::File { path, source }) if source.kind() == std::io::ErrorKind::NotFound => {
                    return Err(probekit::Error::MissingData(path).into())
                }
                other => other?,
            };
            serde_json::from_str::<serde_json::Value>(&text)
                .map_err(probekit::Error::from)
                .with_context(|| format!("reading {}", path.display()))?
        }
        None => serde_json::json!({}),
    };
    let Some(obj) = json.as_object_mut() else {
        return Err(probekit::Error::Config("scenario config must be a JSON object".into()).into());
    };
    if let Some(name) = &args.scenario {
        let scenario: Scenario = name.parse()?;
        obj.insert("scenario".into(), serde_json::to_value(scenario)?);
    } else if !obj.contains_key("scenario") {
        match fallback {
            Some(s) => {
                obj.insert("scenario".into(), serde_json::to_value(s)?);
            }
            None => return Err(probekit::Error::Config("pass --scenario or --config".into()).into()),
        }
    }
    if let Some(v) = args.seed {
        obj.insert("seed".into(), v.into());
    }
    if let Some(v) = args.runs {
        obj.insert("runs".into(), v.into());
    }
    if let Some(v) = args.steps {
        obj.insert("train_steps".into(), v.into());
    }
    if let Some(v) = args.workers {
        obj.insert("workers".into(), v.into());
    }
    if let Some(v) = &args.data {
        obj.insert("data_dir".into(), serde_json::to_value(v)?);
    }
    let mut config = ScenarioConfig::from_json(&json.to_string())?;
    let out = args
        .out
        .clone()
        .or_else(|| config.output_dir.clone())
        .unwrap_or_else(|| Path::new("out").join(config.scenario.name()));
    config.output_dir = Some(out);
    Ok(config)
}

fn runner(config: ScenarioConfig, quiet: bool) -> ScenarioRunner {
    let r = ScenarioRunner::new(config);
    if quiet {
        r
    } else {
        r.with_progress(|msg| eprintln!("{msg}"))
    }
}

fn cmd_run(args: RunArgs) -> Result<()> {
    let config = load_config(&args.scenario, None)?;
    let out = config.output_dir.clone().expect("output dir is always set");
    let outcome = runner(config, args.scenario.quiet).run()?;
    let written = outcome.write_to(&out, args.scenario.split)?;
    for run in &outcome.runs {
        if let Some(step) = run.diverged_at {
            println!("run {}: training diverged at step {step}", run.run);
        }
        if let Some(last) = run.checkpoints.last() {
            println!(
                "run {}: step {} model train error {:.4}, test error {:.4}",
                run.run, last.step, last.model_train_error, last.model_test_error
            );
        }
    }
    for path in written {
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_probe(args: ProbeArgs) -> Result<()> {
    let checkpoint = load_checkpoint(&args.checkpoint)?;
    let scenario: Scenario = checkpoint.scenario.parse()?;
    let mut config = load_config(&args.scenario, Some(scenario))?;
    config.seed = checkpoint.seed;
    config.output_dir = Some(
        args.scenario
            .out
            .clone()
            .unwrap_or_else(|| Path::new("out").join(format!("{}_probe", scenario.name()))),
    );
    let out = config.output_dir.clone().expect("set above");
    let split = args.scenario.split.unwrap_or_else(|| scenario.default_plot_split());
    let records = runner(config, args.scenario.quiet).probe_checkpoint(&checkpoint)?;
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let csv = out.join("records.csv");
    write_records(&records, &csv)?;
    let svg = out.join(svg_file_name(scenario.name(), checkpoint.step));
    let chosen: Vec<_> = records.iter().filter(|r| r.split == split).cloned().collect();
    render_layer_curve(&chosen, &svg, &PlotOptions { split: Some(split), ..Default::default() })?;
    print_means(&records)?;
    println!("wrote {}", csv.display());
    println!("wrote {}", svg.display());
    Ok(())
}

fn print_means(records: &[probekit::report::ProbeRecord]) -> Result<()> {
    println!("{:<16} {:>5} {:>6} {:>9} {:>9} {:>9}", "probe_point", "layer", "split", "mean", "min", "max");
    for a in aggregate_mean(records)? {
        println!(
            "{:<16} {:>5} {:>6} {:>9.6} {:>9.6} {:>9.6}",
            a.probe_point, a.layer_index, a.split, a.mean, a.min, a.max
        );
    }
    Ok(())
}

fn cmd_report(args: ReportArgs) -> Result<()> {
    let records = read_records(&args.records)?;
    if records.is_empty() {
        bail!("{} holds no records", args.records.display());
    }
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| args.records.parent().map(Path::to_path_buf).unwrap_or_default());
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let mut groups: Vec<(String, usize)> = records.iter().map(|r| (r.scenario.clone(), r.checkpoint_step)).collect();
    groups.sort();
    groups.dedup();
    for (scenario, step) in groups {
        let chosen: Vec<_> = records
            .iter()
            .filter(|r| r.scenario == scenario && r.checkpoint_step == step)
            .cloned()
            .collect();
        let split = args.split.unwrap_or_else(|| {
            scenario
                .parse::<Scenario>()
                .map(Scenario::default_plot_split)
                .unwrap_or(Split::Test)
        });
        println!("{scenario} at step {step}");
        print_means(&chosen)?;
        let plotted: Vec<_> = chosen.into_iter().filter(|r| r.split == split).collect();
        if plotted.is_empty() {
            continue;
        }
        let path = out.join(svg_file_name(&scenario, step));
        render_layer_curve(&plotted, &path, &PlotOptions { split: Some(split), ..Default::default() })?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn print_chain(name: &str, spec: &ChainSpec) -> Result<()> {
    let h = chain_conditional_entropies(spec)?;
    let hy = entropy(&Pmf::new(spec.label_marginal())?);
    let seq: Vec<String> = h.iter().map(|v| format!("{v:.6}")).collect();
    println!("{name}: H[Y] = {hy:.6}, H[Y|A_k] = [{}]", seq.join(", "));
    Ok(())
}

fn cmd_entropy(args: EntropyArgs) -> Result<()> {
    for (name, spec) in builtin_chains() {
        print_chain(name, &spec)?;
    }
    for path in &args.chain {
        let text = match fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(probekit::Error::MissingData(path.clone()).into())
            }
            Err(e) => return Err(e).with_context(|| format!("reading {}", path.display())),
        };
        let spec: ChainSpec = serde_json::from_str(&text)
            .map_err(probekit::Error::from)
            .with_context(|| format!("parsing {}", path.display()))?;
        print_chain(&path.display().to_string(), &spec)?;
    }
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<bool> {
    let reports = gradcheck::run_suite(args.seed, args.points)?;
    let mut ok = true;
    for r in &reports {
        let verdict = if r.passed() { "ok" } else { "FAIL" };
        println!(
            "{:<28} max rel error {:.3e}  threshold {:.0e}  {verdict}",
            r.op, r.max_rel_error, r.threshold
        );
        if !r.passed() {
            eprintln!("gradient check failed for {}", r.op);
            ok = false;
        }
    }
    Ok(ok)
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<probekit::Error>()) {
        Some(e) if e.is_missing_input() => 2,
        Some(e) if e.is_invariant_violation() => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => cmd_run(a).map(|_| true),
        Command::Probe(a) => cmd_probe(a).map(|_| true),
        Command::Report(a) => cmd_report(a).map(|_| true),
        Command::EntropyDemo(a) => cmd_entropy(a).map(|_| true),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
