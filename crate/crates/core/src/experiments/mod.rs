//! Datasets, scenario definitions, checkpoints and the end-to-end driver.

mod checkpoint;
mod data;
mod runner;
mod suite;

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::graph::{add_auxiliary_head, add_skip_concat, build_mlp, build_mnist_convnet, ModelGraph};
use crate::optim::OptimizerConfig;
use crate::probe::ProbeTrainConfig;
use crate::report::Split;
use crate::rng::Rng;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, FORMAT_VERSION, MAGIC,
};
pub use data::{
    gen_separable, load_mnist, load_mnist_pair, read_idx_images, read_idx_labels, Dataset, LabeledSet,
    SeparableData, MNIST_TEST_IMAGES, MNIST_TEST_LABELS, MNIST_TRAIN_IMAGES, MNIST_TRAIN_LABELS,
    MNIST_VALIDATION,
};
pub use runner::{
    checkpoint_file_name, resolve_data_dir, run_scenario, CheckpointSummary, RunSummary, ScenarioOutcome,
    ScenarioRunner, DATA_ENV,
};
pub use suite::ProbeBudget;

/// Steps in one pass over the 50 000 MNIST training images at minibatch 64.
pub const MNIST_EPOCH_STEPS: usize = 781;

/// Layers after which `deep128-guides` attaches auxiliary heads.
pub const GUIDE_LAYERS: [usize; 7] = [16, 32, 48, 64, 80, 96, 112];

/// Layer whose affine input is joined with the raw input in `deep128-bridge`.
pub const BRIDGE_TARGET: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scenario {
    /// 32-layer untrained MLP on separable Gaussian data.
    #[serde(rename = "untrained32")]
    Untrained32,
    #[serde(rename = "mnist")]
    Mnist,
    /// 128-layer MLP with only the final head.
    #[serde(rename = "deep128")]
    Deep128,
    /// 128-layer MLP with auxiliary heads every 16 layers.
    #[serde(rename = "deep128-guides")]
    Deep128Guides,
    /// 128-layer MLP whose layer 64 also sees the raw input.
    #[serde(rename = "deep128-bridge")]
    Deep128Bridge,
}

impl Scenario {
    pub const ALL: [Scenario; 5] = [
        Scenario::Untrained32,
        Scenario::Mnist,
        Scenario::Deep128,
        Scenario::Deep128Guides,
        Scenario::Deep128Bridge,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::Untrained32 => "untrained32",
            Scenario::Mnist => "mnist",
            Scenario::Deep128 => "deep128",
            Scenario::Deep128Guides => "deep128-guides",
            Scenario::Deep128Bridge => "deep128-bridge",
        }
    }

    pub fn uses_mnist(self) -> bool {
        self != Scenario::Untrained32
    }

    pub fn classes(self) -> usize {
        match self {
            Scenario::Untrained32 => 2,
            _ => 10,
        }
    }

    fn default_steps(self) -> usize {
        match self {
            Scenario::Untrained32 => 0,
            Scenario::Mnist => 10 * MNIST_EPOCH_STEPS,
            Scenario::Deep128 | Scenario::Deep128Guides => 5000,
            Scenario::Deep128Bridge => 2000,
        }
    }

    /// Checkpoint schedule used when a config does not list one.
    pub fn default_checkpoints(self, train_steps: usize) -> Vec<usize> {
        let mut steps = match self {
            Scenario::Untrained32 => vec![0],
            Scenario::Mnist => (0..=train_steps).step_by(MNIST_EPOCH_STEPS).collect(),
            _ => vec![0, 500],
        };
        steps.push(train_steps);
        steps.retain(|&s| s <= train_steps);
        steps.sort_unstable();
        steps.dedup();
        steps
    }

    /// Split plotted by default: held-out error for the separable and MNIST
    /// convnet runs, training error for the 128-layer runs.
    pub fn default_plot_split(self) -> Split {
        match self {
            Scenario::Untrained32 | Scenario::Mnist => Split::Test,
            _ => Split::Train,
        }
    }

    /// The scenario's model, with its interventions applied.
    pub fn build_graph(self, rng: &mut Rng) -> Result<ModelGraph> {
        match self {
            Scenario::Untrained32 => build_mlp(128, 32, 128, 0.5, 2, rng),
            Scenario::Mnist => build_mnist_convnet(rng),
            Scenario::Deep128 => build_mlp(784, 128, 128, 0.5, 10, rng),
            Scenario::Deep128Guides => {
                let mut g = build_mlp(784, 128, 128, 0.5, 10, rng)?;
                for k in GUIDE_LAYERS {
                    g = add_auxiliary_head(g, &format!("act{k}"), 10, 1.0, rng)?;
                }
                Ok(g)
            }
            Scenario::Deep128Bridge => {
                let g = build_mlp(784, 128, 128, 0.5, 10, rng)?;
                add_skip_concat(g, "input", &format!("fc{BRIDGE_TARGET}"), rng)
            }
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scenario::ALL
            .into_iter()
            .find(|sc| sc.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Scenario::ALL.iter().map(|s| s.name()).collect();
                Error::Config(format!("unknown scenario `{s}` (expected one of {})", names.join(", ")))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub scenario: Scenario,
    pub seed: u64,
    pub runs: usize,
    pub train_steps: usize,
    /// Steps at which the model is checkpointed and probed; derived from the
    /// scenario when absent.
    #[serde(default)]
    pub checkpoint_steps: Option<Vec<usize>>,
    pub probe: ProbeTrainConfig,
    pub optimizer: OptimizerConfig,
    /// Model minibatch size.
    pub minibatch: usize,
    /// Examples generated per run for `untrained32`, split 80/10/10.
    pub samples: usize,
    pub probe_budget: ProbeBudget,
    /// Probe only these points; every registered point when absent.
    #[serde(default)]
    pub probe_points: Option<Vec<String>>,
    /// Training rows scored when reporting the model's own error.
    pub model_eval_rows: usize,
    /// Worker threads; 1 keeps everything on the calling thread.
    pub workers: usize,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub data_dir: Option<PathBuf>,
    /// Write a checkpoint file per scheduled step when an output directory
    /// is set.
    pub save_checkpoints: bool,
}

impl ScenarioConfig {
    pub fn new(scenario: Scenario) -> Self {
        ScenarioConfig {
            scenario,
            seed: 0,
            runs: if scenario == Scenario::Untrained32 { 100 } else { 1 },
            train_steps: scenario.default_steps(),
            checkpoint_steps: None,
            probe: ProbeTrainConfig::default(),
            optimizer: OptimizerConfig::rmsprop(1e-3, 0.9, 1e-8),
            minibatch: 64,
            samples: 10_000,
            probe_budget: ProbeBudget::default(),
            probe_points: None,
            model_eval_rows: 10_000,
            workers: 1,
            output_dir: None,
            data_dir: None,
            save_checkpoints: true,
        }
    }

    /// Parses a JSON object. Only `scenario` is required; every other field
    /// falls back to that scenario's defaults, and nested objects (`probe`,
    /// `optimizer`, `probe_budget`) may be given partially.
    pub fn from_json(text: &str) -> Result<Self> {
        let overlay: Value = serde_json::from_str(text)?;
        let Value::Object(overlay) = overlay else {
            return Err(Error::Config("scenario config must be a JSON object".into()));
        };
        let scenario: Scenario = match overlay.get("scenario") {
            Some(v) => serde_json::from_value(v.clone())
                .map_err(|e| Error::Config(format!("scenario: {e}")))?,
            None => return Err(Error::Config("scenario config needs a `scenario` field".into())),
        };
        let mut base = serde_json::to_value(ScenarioConfig::new(scenario))?;
        let Value::Object(fields) = &mut base else {
            unreachable!("configs serialize to objects")
        };
        for (key, value) in overlay {
            match (fields.get_mut(&key), value) {
                (Some(Value::Object(inner)), Value::Object(patch)) => {
                    inner.extend(patch);
                }
                (_, value) => {
                    fields.insert(key, value);
                }
            }
        }
        let config: ScenarioConfig =
            serde_json::from_value(base).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("configs serialize")
    }

    /// The explicit checkpoint list or the scenario default.
    pub fn checkpoints(&self) -> Vec<usize> {
        self.checkpoint_steps
            .clone()
            .unwrap_or_else(|| self.scenario.default_checkpoints(self.train_steps))
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.runs == 0 {
            return fail("runs must be at least 1".into());
        }
        if self.minibatch == 0 {
            return fail("minibatch must be at least 1".into());
        }
        if self.model_eval_rows == 0 {
            return fail("model_eval_rows must be at least 1".into());
        }
        if self.scenario == Scenario::Untrained32 && self.train_steps != 0 {
            return fail("untrained32 does not train the model; train_steps must be 0".into());
        }
        if self.scenario == Scenario::Untrained32 && self.samples < 10 {
            return fail("untrained32 needs at least 10 samples per run".into());
        }
        let steps = self.checkpoints();
        if steps.is_empty() {
            return fail("at least one checkpoint step is required".into());
        }
        if steps.windows(2).any(|w| w[0] >= w[1]) {
            return fail(format!("checkpoint steps {steps:?} must be strictly increasing"));
        }
        if let Some(&last) = steps.last().filter(|&&s| s > self.train_steps) {
            return fail(format!(
                "checkpoint step {last} exceeds train_steps {}",
                self.train_steps
            ));
        }
        self.probe.validate()?;
        self.optimizer.validate()?;
        self.probe_budget.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_schedules() {
        assert_eq!(ScenarioConfig::new(Scenario::Untrained32).checkpoints(), vec![0]);
        let mnist = ScenarioConfig::new(Scenario::Mnist).checkpoints();
        assert_eq!(mnist.len(), 11);
        assert_eq!(mnist[1], 781);
        assert_eq!(*mnist.last().unwrap(), 7810);
        assert_eq!(ScenarioConfig::new(Scenario::Deep128Guides).checkpoints(), vec![0, 500, 5000]);
        assert_eq!(ScenarioConfig::new(Scenario::Deep128Bridge).checkpoints(), vec![0, 500, 2000]);
        assert_eq!(Scenario::Mnist.default_checkpoints(200), vec![0, 200]);
    }

    #[test]
    fn json_overlay_keeps_defaults() {
        let c = ScenarioConfig::from_json(r#"{"scenario": "mnist", "seed": 5, "probe": {"max_epochs": 3}}"#)
            .unwrap();
        assert_eq!(c.seed, 5);
        assert_eq!(c.probe.max_epochs, 3);
        assert_eq!(c.probe.minibatch, 256);
        assert_eq!(c.train_steps, 7810);
    }

    #[test]
    fn json_rejects_unknown_fields_and_bad_schedules() {
        assert!(ScenarioConfig::from_json(r#"{"scenario": "mnist", "colour": 1}"#).is_err());
        assert!(ScenarioConfig::from_json(r#"{"scenario": "mnist", "probe": {"lr": 1}}"#).is_err());
        assert!(ScenarioConfig::from_json(r#"{"seed": 1}"#).is_err());
        assert!(ScenarioConfig::from_json(
            r#"{"scenario": "deep128-bridge", "checkpoint_steps": [0, 3000]}"#
        )
        .is_err());
        assert!(ScenarioConfig::from_json(r#"{"scenario": "untrained32", "train_steps": 4}"#).is_err());
    }

    #[test]
    fn json_round_trip() {
        let c = ScenarioConfig::new(Scenario::Deep128Guides);
        assert_eq!(ScenarioConfig::from_json(&c.to_json()).unwrap(), c);
    }

    #[test]
    fn scenario_names_parse() {
        for s in Scenario::ALL {
            assert_eq!(s.name().parse::<Scenario>().unwrap(), s);
        }
        assert!("deep64".parse::<Scenario>().is_err());
    }
}
