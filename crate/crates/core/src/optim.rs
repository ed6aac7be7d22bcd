//! Gradient-descent optimizers shared by models and probes.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Parameters;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Rmsprop { decay: f32, epsilon: f32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    #[serde(flatten)]
    pub kind: OptimizerKind,
    pub learning_rate: f32,
}

impl OptimizerConfig {
    pub fn sgd(learning_rate: f32) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Sgd,
            learning_rate,
        }
    }

    pub fn rmsprop(learning_rate: f32, decay: f32, epsilon: f32) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Rmsprop { decay, epsilon },
            learning_rate,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok_lr = self.learning_rate.is_finite() && self.learning_rate > 0.0;
        let ok_kind = match self.kind {
            OptimizerKind::Sgd => true,
            OptimizerKind::Rmsprop { decay, epsilon } => {
                (0.0..1.0).contains(&decay) && epsilon.is_finite() && epsilon > 0.0
            }
        };
        if ok_lr && ok_kind {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

impl Default for OptimizerConfig {
    /// RMSProp with learning rate 1e-3, decay 0.9, epsilon 1e-8.
    fn default() -> Self {
        OptimizerConfig::rmsprop(1e-3, 0.9, 1e-8)
    }
}

/// Optimizer hyperparameters plus per-parameter mean-square accumulators.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    config: OptimizerConfig,
    accumulators: BTreeMap<String, Tensor>,
    steps: usize,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, params: &Parameters) -> Self {
        let accumulators = match config.kind {
            OptimizerKind::Sgd => BTreeMap::new(),
            OptimizerKind::Rmsprop { .. } => params
                .iter()
                .map(|(name, t)| (name.clone(), Tensor::zeros(t.shape().to_vec())))
                .collect(),
        };
        OptimizerState {
            config,
            accumulators,
            steps: 0,
        }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn accumulator(&self, name: &str) -> Option<&Tensor> {
        self.accumulators.get(name)
    }

    /// One update of every parameter that has a gradient in `grads`.
    ///
    /// SGD: `p -= lr * g`. RMSProp: `v = d * v + (1 - d) * g^2`,
    /// `p -= lr * g / (sqrt(v) + eps)`.
    pub fn step(&mut self, params: &mut Parameters, grads: &Parameters) -> Result<()> {
        let lr = self.config.learning_rate;
        for (name, grad) in grads.iter() {
            let param = params
                .get_mut(name)
                .ok_or_else(|| Error::ParameterMismatch(format!("no parameter named `{name}`")))?;
            if param.shape() != grad.shape() {
                return Err(Error::shape("optimizer step", param.shape(), grad.shape()));
            }
            match self.config.kind {
                OptimizerKind::Sgd => {
                    for (p, &g) in param.data_mut().iter_mut().zip(grad.data()) {
                        *p -= lr * g;
                    }
                }
                OptimizerKind::Rmsprop { decay, epsilon } => {
                    let acc = self.accumulators.get_mut(name).ok_or_else(|| {
                        Error::ParameterMismatch(format!("no accumulator for `{name}`"))
                    })?;
                    if acc.shape() != grad.shape() {
                        return Err(Error::shape("optimizer step", acc.shape(), grad.shape()));
                    }
                    for ((p, v), &g) in param
                        .data_mut()
                        .iter_mut()
                        .zip(acc.data_mut().iter_mut())
                        .zip(grad.data())
                    {
                        *v = decay * *v + (1.0 - decay) * g * g;
                        *p -= lr * g / (v.sqrt() + epsilon);
                    }
                }
            }
        }
        self.steps += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f32) -> Parameters {
        let mut p = Parameters::default();
        p.insert("theta", Tensor::scalar(value));
        p
    }

    #[test]
    fn sgd_on_square() {
        // f(theta) = theta^2, gradient 2 theta.
        let mut params = single(1.0);
        let mut opt = OptimizerState::new(OptimizerConfig::sgd(0.1), &params);
        let theta = params.get("theta").unwrap().data()[0];
        opt.step(&mut params, &single(2.0 * theta)).unwrap();
        assert!((params.get("theta").unwrap().data()[0] - 0.8).abs() < 1e-7);
    }

    #[test]
    fn rmsprop_first_step() {
        let mut params = single(0.0);
        let mut opt = OptimizerState::new(OptimizerConfig::rmsprop(1e-3, 0.9, 1e-8), &params);
        opt.step(&mut params, &single(1.0)).unwrap();
        let delta = params.get("theta").unwrap().data()[0] as f64;
        let expected = -1e-3 / (0.1f64.sqrt() + 1e-8);
        assert!((delta - expected).abs() < 1e-8, "{delta} vs {expected}");
        assert!(opt.accumulator("theta").unwrap().data()[0] >= 0.0);
    }

    #[test]
    fn unknown_gradient_name_is_rejected() {
        let mut params = single(0.0);
        let mut opt = OptimizerState::new(OptimizerConfig::sgd(0.1), &params);
        let mut grads = Parameters::default();
        grads.insert("other", Tensor::scalar(1.0));
        assert!(opt.step(&mut params, &grads).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(OptimizerConfig::default().validate().is_ok());
        assert!(OptimizerConfig::sgd(0.0).validate().is_err());
        assert!(OptimizerConfig::rmsprop(1e-3, 1.0, 1e-8).validate().is_err());
    }
}
