use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::checkpoint::{save_checkpoint, Checkpoint};
use super::data::{gen_separable, load_mnist, Dataset};
use super::suite::{run_suite, SuiteRequest};
use super::{Scenario, ScenarioConfig};
use crate::error::{Error, Result};
use crate::graph::ModelGraph;
use crate::optim::OptimizerState;
use crate::par::*;
use crate::probe::{label_indices, Probe, EVAL_CHUNK};
use crate::report::{render_layer_curve, svg_file_name, write_records, PlotOptions, ProbeRecord, Split};
use crate::rng::Rng;
use crate::tensor::softmax_cross_entropy;

/// Environment variable naming the default MNIST directory.
pub const DATA_ENV: &str = "PROBEKIT_DATA";

/// The configured data directory, else `$PROBEKIT_DATA`, else `data/mnist`.
pub fn resolve_data_dir(configured: Option<&Path>) -> PathBuf {
    configured
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(DATA_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("data/mnist"))
}

pub fn checkpoint_file_name(scenario: Scenario, run: usize, step: usize) -> String {
    format!("{}_run{run}_step{step}.lcp", scenario.name())
}

/// The model's own classifier at one checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointSummary {
    pub step: usize,
    pub parameter_checksum: u64,
    /// Main-head error on the first `model_eval_rows` training rows.
    pub model_train_error: f64,
    pub model_train_loss: f64,
    pub model_test_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run: usize,
    /// Step whose update produced a non-finite loss; training stopped there
    /// and later checkpoints hold the last finite parameters.
    pub diverged_at: Option<usize>,
    pub checkpoints: Vec<CheckpointSummary>,
    /// Total training loss of every completed step.
    pub losses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioOutcome {
    pub config: ScenarioConfig,
    pub records: Vec<ProbeRecord>,
    pub runs: Vec<RunSummary>,
}

impl ScenarioOutcome {
    pub fn diverged(&self) -> bool {
        self.runs.iter().any(|r| r.diverged_at.is_some())
    }

    /// Records of one checkpoint step and split, across runs.
    pub fn select(&self, step: usize, split: Split) -> Vec<&ProbeRecord> {
        self.records
            .iter()
            .filter(|r| r.checkpoint_step == step && r.split == split)
            .collect()
    }

    /// Writes `records.csv` (plus its JSON mirror), `summary.json` and one
    /// SVG chart per checkpoint into `dir`.
    pub fn write_to(&self, dir: &Path, split: Option<Split>) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
        let mut written = Vec::new();
        let records = dir.join("records.csv");
        write_records(&self.records, &records)?;
        written.push(records);
        let summary = dir.join("summary.json");
        fs::write(&summary, serde_json::to_vec_pretty(&self.runs)?).map_err(|e| Error::file(&summary, e))?;
        written.push(summary);
        let split = split.unwrap_or_else(|| self.config.scenario.default_plot_split());
        let options = PlotOptions {
            split: Some(split),
            chance_line: true,
            title: None,
        };
        for step in self.config.checkpoints() {
            let chosen: Vec<ProbeRecord> = self.select(step, split).into_iter().cloned().collect();
            if chosen.is_empty() {
                continue;
            }
            let path = dir.join(svg_file_name(self.config.scenario.name(), step));
            render_layer_curve(&chosen, &path, &options)?;
            written.push(path);
        }
        Ok(written)
    }
}

type Progress = Arc<dyn Fn(&str) + Send + Sync>;

/// Builder around [`run_scenario`] with an optional preloaded dataset and a
/// progress callback.
#[derive(Clone)]
pub struct ScenarioRunner {
    config: ScenarioConfig,
    dataset: Option<Arc<Dataset>>,
    progress: Option<Progress>,
}

impl ScenarioRunner {
    pub fn new(config: ScenarioConfig) -> Self {
        ScenarioRunner {
            config,
            dataset: None,
            progress: None,
        }
    }

    /// Uses `dataset` instead of loading MNIST from disk.
    pub fn with_dataset(mut self, dataset: Arc<Dataset>) -> Self {
        self.dataset = Some(dataset);
        self
    }

    pub fn with_progress(mut self, f: impl Fn(&str) + Send + Sync + 'static) -> Self {
        self.progress = Some(Arc::new(f));
        self
    }

    fn note(&self, msg: impl FnOnce() -> String) {
        if let Some(p) = &self.progress {
            p(&msg());
        }
    }

    pub fn run(&self) -> Result<ScenarioOutcome> {
        let config = &self.config;
        config.validate()?;
        let shared = self.dataset_for_run()?;
        if let Some(dir) = self.checkpoint_dir() {
            fs::create_dir_all(&dir).map_err(|e| Error::file(&dir, e))?;
        }
        let results: Vec<(Vec<ProbeRecord>, RunSummary)> = crate::par::with_workers(config.workers, || {
            (0..config.runs)
                .into_par_iter()
                .map(|run| self.run_one(run, shared.as_ref()))
                .collect::<Result<Vec<_>>>()
        })?;
        let mut records = Vec::new();
        let mut runs = Vec::new();
        for (r, s) in results {
            records.extend(r);
            runs.push(s);
        }
        Ok(ScenarioOutcome {
            config: config.clone(),
            records,
            runs,
        })
    }

    fn checkpoint_dir(&self) -> Option<PathBuf> {
        let c = &self.config;
        c.output_dir
            .as_ref()
            .filter(|_| c.save_checkpoints)
            .map(|d| d.join("checkpoints"))
    }

    fn prepare(&self, seed: u64, run: usize, shared: Option<&Arc<Dataset>>) -> Result<RunContext> {
        let config = &self.config;
        let stream = |label: &str| Rng::stream_named(seed, &[run as u64], label);
        let data = match shared {
            Some(d) => RunData::Shared(d.clone()),
            None => {
                let n = config.samples;
                let set = gen_separable(n, 128, &mut stream("data")).set;
                RunData::Owned(Dataset::split(set, n * 8 / 10, (n / 10).max(1))?)
            }
        };
        let graph = config.scenario.build_graph(&mut stream("init"))?;
        let points: Vec<(String, usize, String)> = match &config.probe_points {
            None => graph
                .probe_points()
                .iter()
                .enumerate()
                .map(|(i, p)| (p.name.clone(), i, p.node.clone()))
                .collect(),
            Some(names) => {
                if let Some(missing) = names.iter().find(|n| graph.probe_point(n).is_err()) {
                    return Err(Error::UnknownProbePoint(missing.clone()));
                }
                graph
                    .probe_points()
                    .iter()
                    .enumerate()
                    .filter(|(_, p)| names.contains(&p.name))
                    .map(|(i, p)| (p.name.clone(), i, p.node.clone()))
                    .collect()
            }
        };
        let mut nodes: Vec<(String, String)> = Vec::new();
        for (name, _, node) in &points {
            if !nodes.iter().any(|(n, _)| n == node) {
                nodes.push((node.clone(), name.clone()));
            }
        }
        let (train_len, val_len) = {
            let d = data.get();
            (d.train.len(), d.validation.len())
        };
        let mut row_rng = stream("probe-rows");
        let train_order = row_rng.permutation(train_len);
        let val_order = row_rng.permutation(val_len);
        Ok(RunContext {
            seed,
            run,
            data,
            graph,
            points,
            nodes,
            train_order,
            val_order,
        })
    }

    fn summarize(&self, ctx: &RunContext, step: usize) -> Result<CheckpointSummary> {
        let data = ctx.data.get();
        let eval_rows = &ctx.train_order[..self.config.model_eval_rows.min(ctx.train_order.len())];
        let (train_err, train_loss) = model_error(&ctx.graph, data, eval_rows, false)?;
        let (test_err, _) = model_error(&ctx.graph, data, &[], true)?;
        let scenario = self.config.scenario;
        let run = ctx.run;
        self.note(|| {
            format!("{scenario} run {run}: checkpoint {step}, model train error {train_err:.4}, test error {test_err:.4}")
        });
        Ok(CheckpointSummary {
            step,
            parameter_checksum: ctx.graph.parameters().checksum(),
            model_train_error: train_err,
            model_train_loss: train_loss,
            model_test_error: test_err,
        })
    }

    fn probe(
        &self,
        ctx: &RunContext,
        step: usize,
        warm: &HashMap<String, Probe>,
    ) -> Result<(Vec<ProbeRecord>, HashMap<String, Probe>)> {
        let config = &self.config;
        let scenario = config.scenario;
        if ctx.nodes.is_empty() {
            return Ok((Vec::new(), HashMap::new()));
        }
        let results = run_suite(SuiteRequest {
            graph: &ctx.graph,
            data: ctx.data.get(),
            nodes: &ctx.nodes,
            config: &config.probe,
            budget: &config.probe_budget,
            train_order: &ctx.train_order,
            val_order: &ctx.val_order,
            rng: Rng::stream_named(ctx.seed, &[ctx.run as u64, step as u64], "probes"),
            warm: Some(warm),
        })?;
        let by_node: HashMap<&str, usize> =
            results.iter().enumerate().map(|(i, r)| (r.node.as_str(), i)).collect();
        let mut records = Vec::with_capacity(2 * ctx.points.len());
        for (name, layer, node) in &ctx.points {
            let r = &results[by_node[node.as_str()]];
            for (split, err) in [(Split::Train, r.train_error), (Split::Test, r.test_error)] {
                records.push(ProbeRecord {
                    scenario: scenario.name().to_string(),
                    run: ctx.run,
                    checkpoint_step: step,
                    probe_point: name.clone(),
                    layer_index: *layer,
                    split,
                    error_rate: err,
                    probe_epochs_used: r.epochs_used,
                });
            }
        }
        let run = ctx.run;
        self.note(|| {
            let best = results.iter().map(|r| r.test_error).fold(f64::INFINITY, f64::min);
            format!(
                "{scenario} run {run}: probed {} activations at step {step}, best test error {best:.4}",
                results.len()
            )
        });
        Ok((records, results.into_iter().map(|r| (r.node, r.probe)).collect()))
    }

    /// Probes a saved checkpoint of this runner's scenario. The data split
    /// and probe seeds follow the checkpoint's seed and run.
    pub fn probe_checkpoint(&self, checkpoint: &Checkpoint) -> Result<Vec<ProbeRecord>> {
        let config = &self.config;
        if checkpoint.scenario != config.scenario.name() {
            return Err(Error::Config(format!(
                "checkpoint belongs to `{}`, not `{}`",
                checkpoint.scenario, config.scenario
            )));
        }
        let shared = self.dataset_for_run()?;
        let mut ctx = self.prepare(checkpoint.seed, checkpoint.run, shared.as_ref())?;
        ctx.graph.load_parameters(checkpoint.parameters.clone())?;
        crate::par::with_workers(config.workers, || {
            self.probe(&ctx, checkpoint.step, &HashMap::new()).map(|(r, _)| r)
        })
    }

    fn dataset_for_run(&self) -> Result<Option<Arc<Dataset>>> {
        if !self.config.scenario.uses_mnist() {
            return Ok(None);
        }
        if let Some(d) = &self.dataset {
            return Ok(Some(d.clone()));
        }
        let dir = resolve_data_dir(self.config.data_dir.as_deref());
        self.note(|| format!("loading MNIST from {}", dir.display()));
        Ok(Some(Arc::new(load_mnist(&dir)?)))
    }

    fn run_one(&self, run: usize, shared: Option<&Arc<Dataset>>) -> Result<(Vec<ProbeRecord>, RunSummary)> {
        let config = &self.config;
        let scenario = config.scenario;
        let mut ctx = self.prepare(config.seed, run, shared)?;
        let mut optimizer = OptimizerState::new(config.optimizer, ctx.graph.parameters());
        let mut batch_rng = Rng::stream_named(config.seed, &[run as u64], "batches");
        let n = ctx.data.get().train.len();
        let mb = config.minibatch.min(n);
        let mut order = batch_rng.permutation(n);
        let mut cursor = 0;
        let mut step = 0;
        let mut diverged_at = None;
        let mut losses = Vec::with_capacity(config.train_steps);
        let mut summaries = Vec::new();
        let mut records = Vec::new();
        let mut warm = HashMap::new();

        for target in config.checkpoints() {
            while step < target && diverged_at.is_none() {
                if cursor + mb > n {
                    order = batch_rng.permutation(n);
                    cursor = 0;
                }
                let rows = &order[cursor..cursor + mb];
                cursor += mb;
                let train = &ctx.data.get().train;
                let x = train.inputs.gather_rows(rows);
                let y = train.labels.gather_rows(rows);
                match ctx.graph.train_step(&mut optimizer, &x, &y, step + 1) {
                    Ok(loss) => losses.push(loss),
                    Err(Error::Diverged { step: s, loss }) => {
                        self.note(|| format!("{scenario} run {run}: loss {loss} at step {s}, training stopped"));
                        diverged_at = Some(s);
                    }
                    Err(e) => return Err(e),
                }
                step += 1;
                if step % 500 == 0 {
                    let recent = &losses[losses.len().saturating_sub(100)..];
                    let mean = recent.iter().sum::<f64>() / recent.len().max(1) as f64;
                    self.note(|| format!("{scenario} run {run}: step {step}, mean loss {mean:.4}"));
                }
            }
            if let Some(dir) = self.checkpoint_dir() {
                let ckpt = Checkpoint {
                    scenario: scenario.name().to_string(),
                    run,
                    seed: config.seed,
                    step: target,
                    parameters: ctx.graph.parameters().clone(),
                };
                save_checkpoint(&ckpt, &dir.join(checkpoint_file_name(scenario, run, target)))?;
            }
            summaries.push(self.summarize(&ctx, target)?);
            let (r, next) = self.probe(&ctx, target, &warm)?;
            records.extend(r);
            warm = next;
        }
        Ok((
            records,
            RunSummary {
                run,
                diverged_at,
                checkpoints: summaries,
                losses,
            },
        ))
    }
}

enum RunData {
    Shared(Arc<Dataset>),
    Owned(Dataset),
}

impl RunData {
    fn get(&self) -> &Dataset {
        match self {
            RunData::Shared(d) => d,
            RunData::Owned(d) => d,
        }
    }
}

struct RunContext {
    seed: u64,
    run: usize,
    data: RunData,
    graph: ModelGraph,
    /// `(point name, layer index, node)` for every probed point.
    points: Vec<(String, usize, String)>,
    /// Distinct probed nodes with one representative point name each.
    nodes: Vec<(String, String)>,
    train_order: Vec<usize>,
    val_order: Vec<usize>,
}

/// Main-head error and mean cross-entropy on the listed training rows, or on
/// the whole test split.
fn model_error(graph: &ModelGraph, data: &Dataset, rows: &[usize], test: bool) -> Result<(f64, f64)> {
    let head = graph.main_head();
    let set = if test { &data.test } else { &data.train };
    let n = if test { set.len() } else { rows.len() };
    if n == 0 {
        return Ok((f64::NAN, f64::NAN));
    }
    let starts: Vec<usize> = (0..n).step_by(EVAL_CHUNK).collect();
    let parts: Vec<(usize, f64)> = starts
        .par_iter()
        .map(|&start| -> Result<(usize, f64)> {
            let end = (start + EVAL_CHUNK).min(n);
            let (x, y) = if test {
                (set.inputs.slice_rows(start..end), set.labels.slice_rows(start..end))
            } else {
                (set.inputs.gather_rows(&rows[start..end]), set.labels.gather_rows(&rows[start..end]))
            };
            let logits = graph.forward_until(&x, &[&head])?.remove(0);
            let (loss, _) = softmax_cross_entropy(&logits, &y)?;
            let classes = label_indices(&y)?;
            let wrong = logits
                .data()
                .chunks_exact(logits.row_len())
                .zip(&classes)
                .filter(|(row, &c)| {
                    let mut best = 0;
                    for (j, &v) in row.iter().enumerate() {
                        if v > row[best] {
                            best = j;
                        }
                    }
                    best != c
                })
                .count();
            Ok((wrong, loss * (end - start) as f64))
        })
        .collect::<Result<_>>()?;
    let wrong: usize = parts.iter().map(|p| p.0).sum();
    let loss: f64 = parts.iter().map(|p| p.1).sum();
    Ok((wrong as f64 / n as f64, loss / n as f64))
}

/// Runs a scenario end to end, loading MNIST when the scenario needs it.
pub fn run_scenario(config: &ScenarioConfig) -> Result<ScenarioOutcome> {
    ScenarioRunner::new(config.clone()).run()
}
