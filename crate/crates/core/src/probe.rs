//! Linear classifier probes trained on frozen activations.
//!
//! A probe is `softmax(W h + b)` over the flattened activation `h` at one
//! probe point. Probes read activations produced by a forward pass and never
//! take part in the model's loss, so no gradient can reach the model.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{ModelGraph, Parameters};
use crate::optim::{OptimizerConfig, OptimizerState};
use crate::par::*;
use crate::rng::Rng;
use crate::tensor::{gemm, softmax_cross_entropy, Tensor};

/// Rows evaluated per forward or scoring chunk.
pub const EVAL_CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeTrainConfig {
    pub learning_rate: f32,
    pub max_epochs: usize,
    /// Epochs without a validation improvement before stopping.
    pub patience: usize,
    pub minibatch: usize,
    pub validation_size: usize,
    /// Center each feature and rescale the point to unit RMS using
    /// training-split statistics before the linear map. This changes the optimizer's conditioning, not the family
    /// of classifiers a probe can express.
    pub standardize: bool,
    /// Start each checkpoint's probe from the previous checkpoint's weights.
    pub warm_start: bool,
}

impl Default for ProbeTrainConfig {
    fn default() -> Self {
        ProbeTrainConfig {
            learning_rate: 1e-3,
            max_epochs: 100,
            patience: 5,
            minibatch: 256,
            validation_size: 10_000,
            standardize: true,
            warm_start: false,
        }
    }
}

impl ProbeTrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = self.learning_rate.is_finite()
            && self.learning_rate > 0.0
            && self.max_epochs > 0
            && self.patience > 0
            && self.minibatch > 0
            && self.validation_size > 0;
        if positive {
            Ok(())
        } else {
            Err(Error::Config(
                "probe learning rate, epochs, patience, minibatch and validation size must be positive"
                    .into(),
            ))
        }
    }

    fn optimizer(&self) -> OptimizerConfig {
        OptimizerConfig::rmsprop(self.learning_rate, 0.9, 1e-8)
    }
}

/// `(x - shift) * scale` with a per-feature shift and one scale for the whole
/// point. Per-feature scales would blow up features that are almost always
/// constant (image borders), turning rare held-out values into outliers.
#[derive(Debug, Clone, PartialEq)]
struct Standardizer {
    shift: Vec<f32>,
    scale: f32,
}

impl Standardizer {
    fn fit(features: &Tensor) -> Self {
        let (n, k) = (features.rows(), features.row_len());
        let mut mean = vec![0.0f64; k];
        for row in features.data().chunks_exact(k) {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut sq = 0.0f64;
        for row in features.data().chunks_exact(k) {
            for (&m, &v) in mean.iter().zip(row) {
                sq += (v as f64 - m).powi(2);
            }
        }
        let rms = (sq / (n * k) as f64).sqrt();
        let scale = if rms > 0.0 && rms.is_finite() { (1.0 / rms) as f32 } else { 1.0 };
        Standardizer {
            shift: mean.iter().map(|&m| m as f32).collect(),
            scale,
        }
    }

    fn apply(&self, rows: &mut [f32]) {
        let k = self.shift.len();
        let s = self.scale;
        for row in rows.chunks_exact_mut(k) {
            for (v, &m) in row.iter_mut().zip(&self.shift) {
                *v = (*v - m) * s;
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Probe {
    point: String,
    node: String,
    classes: usize,
    features: usize,
    /// `weight` is `[classes, features]`, `bias` is `[classes]`.
    params: Parameters,
    standardizer: Option<Standardizer>,
    optimizer: Option<OptimizerState>,
    shuffle_seed: u64,
}

impl Probe {
    /// Zero-initialized probe over `features` inputs.
    pub fn new(point: impl Into<String>, classes: usize, features: usize, shuffle_seed: u64) -> Self {
        let point = point.into();
        let mut params = Parameters::default();
        params.insert("weight", Tensor::zeros(vec![classes, features]));
        params.insert("bias", Tensor::zeros(vec![classes]));
        Probe {
            node: point.clone(),
            point,
            classes,
            features,
            params,
            standardizer: None,
            optimizer: None,
            shuffle_seed,
        }
    }

    /// Probe with explicit weights `[classes, features]` and bias, applied to
    /// raw features.
    pub fn from_parts(point: impl Into<String>, weight: Tensor, bias: Tensor) -> Result<Self> {
        let &[classes, features] = weight.shape() else {
            return Err(Error::input("probe", format!("weight must be a matrix, got {:?}", weight.shape())));
        };
        if bias.shape() != [classes] {
            return Err(Error::shape("probe", weight.shape(), bias.shape()));
        }
        let mut probe = Probe::new(point, classes, features, 0);
        probe.params.insert("weight", weight);
        probe.params.insert("bias", bias);
        Ok(probe)
    }

    pub fn point(&self) -> &str {
        &self.point
    }

    /// Graph node whose activation the probe reads.
    pub fn node(&self) -> &str {
        &self.node
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn feature_dim(&self) -> usize {
        self.features
    }

    pub fn weight(&self) -> &Tensor {
        self.params.get("weight").expect("probes always hold a weight")
    }

    pub fn bias(&self) -> &Tensor {
        self.params.get("bias").expect("probes always hold a bias")
    }

    pub fn optimizer(&self) -> Option<&OptimizerState> {
        self.optimizer.as_ref()
    }

    /// Resets weights, bias, standardization and optimizer state.
    pub fn reset(&mut self) {
        let fresh = Probe::new(self.point.clone(), self.classes, self.features, self.shuffle_seed);
        self.params = fresh.params;
        self.standardizer = None;
        self.optimizer = None;
    }

    fn check_dims(&self, features: &Tensor, labels: &Tensor) -> Result<()> {
        if features.rank() == 0 || features.row_len() != self.features {
            return Err(Error::shape("probe features", &[self.features], features.shape()));
        }
        if labels.shape() != [features.rows(), self.classes] {
            return Err(Error::shape("probe labels", &[features.rows(), self.classes], labels.shape()));
        }
        Ok(())
    }

    fn prepared(&self, features: &Tensor, rows: std::ops::Range<usize>) -> Vec<f32> {
        let k = self.features;
        let mut x = features.data()[rows.start * k..rows.end * k].to_vec();
        if let Some(s) = &self.standardizer {
            s.apply(&mut x);
        }
        x
    }

    fn logits_of(&self, x: &[f32], rows: usize) -> Vec<f32> {
        let mut out = Vec::with_capacity(rows * self.classes);
        for _ in 0..rows {
            out.extend_from_slice(self.bias().data());
        }
        gemm(
            false,
            true,
            rows,
            self.classes,
            self.features,
            1.0,
            x,
            self.weight().data(),
            1.0,
            &mut out,
        );
        out
    }

    /// `W h + b` for every row of `features` (after standardization, when the
    /// probe has been trained with it).
    pub fn logits(&self, features: &Tensor) -> Result<Tensor> {
        if features.rank() == 0 || features.row_len() != self.features {
            return Err(Error::shape("probe features", &[self.features], features.shape()));
        }
        let n = features.rows();
        let mut out = Vec::with_capacity(n * self.classes);
        for start in (0..n).step_by(EVAL_CHUNK) {
            let end = (start + EVAL_CHUNK).min(n);
            let x = self.prepared(features, start..end);
            out.extend(self.logits_of(&x, end - start));
        }
        Tensor::new(vec![n, self.classes], out)
    }

    /// Predicted class per row; ties go to the lowest class index.
    pub fn predict(&self, features: &Tensor) -> Result<Vec<usize>> {
        let logits = self.logits(features)?;
        Ok(logits.data().chunks_exact(self.classes).map(argmax).collect())
    }

    /// Mean cross-entropy and its gradient with respect to `weight` and
    /// `bias` over the given rows.
    fn loss_and_grad(&self, x: &[f32], labels: &Tensor) -> Result<(f64, Parameters)> {
        let rows = labels.rows();
        let logits = Tensor::new(vec![rows, self.classes], self.logits_of(x, rows))?;
        let (loss, g) = softmax_cross_entropy(&logits, labels)?;
        let mut gw = vec![0.0f32; self.classes * self.features];
        gemm(true, false, self.classes, self.features, rows, 1.0, g.data(), x, 0.0, &mut gw);
        let mut gb = vec![0.0f32; self.classes];
        for row in g.data().chunks_exact(self.classes) {
            for (acc, &v) in gb.iter_mut().zip(row) {
                *acc += v;
            }
        }
        let mut grads = Parameters::default();
        grads.insert("weight", Tensor::new(vec![self.classes, self.features], gw)?);
        grads.insert("bias", Tensor::new(vec![self.classes], gb)?);
        Ok((loss, grads))
    }

    /// Mean cross-entropy of the probe on a labelled set.
    pub fn loss(&self, features: &Tensor, labels: &Tensor) -> Result<f64> {
        self.check_dims(features, labels)?;
        let x = self.prepared(features, 0..features.rows());
        self.loss_and_grad(&x, labels).map(|(l, _)| l)
    }

    /// Plain full-batch gradient descent, returning the loss before each of
    /// the `steps` updates followed by the final loss.
    pub fn full_batch_descent(
        &mut self,
        features: &Tensor,
        labels: &Tensor,
        learning_rate: f32,
        steps: usize,
    ) -> Result<Vec<f64>> {
        self.check_dims(features, labels)?;
        let x = self.prepared(features, 0..features.rows());
        let mut opt = OptimizerState::new(OptimizerConfig::sgd(learning_rate), &self.params);
        let mut losses = Vec::with_capacity(steps + 1);
        for _ in 0..steps {
            let (loss, grads) = self.loss_and_grad(&x, labels)?;
            losses.push(loss);
            opt.step(&mut self.params, &grads)?;
        }
        losses.push(self.loss_and_grad(&x, labels)?.0);
        Ok(losses)
    }
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Class index of every one-hot label row.
pub fn label_indices(labels: &Tensor) -> Result<Vec<usize>> {
    if labels.rank() != 2 {
        return Err(Error::input("labels", format!("expected [n, classes], got {:?}", labels.shape())));
    }
    labels
        .data()
        .chunks_exact(labels.row_len().max(1))
        .enumerate()
        .map(|(i, row)| {
            crate::tensor::one_hot_index(row)
                .ok_or_else(|| Error::input("labels", format!("row {i} is not one-hot")))
        })
        .collect()
}

/// One zero-initialized probe per listed point. The shuffle seed of each
/// probe depends on `rng` and the node it reads, so aliased points train
/// identically.
pub fn attach_probes(
    graph: &ModelGraph,
    points: &[&str],
    classes: usize,
    rng: &mut Rng,
) -> Result<Vec<Probe>> {
    let base = rng.next_u64();
    points
        .iter()
        .map(|name| {
            let point = graph.probe_point(name)?;
            let features = graph.node_shape(&point.node)?.iter().product();
            let seed = Rng::stream_named(base, &[], &point.node).next_u64();
            let mut probe = Probe::new(*name, classes, features, seed);
            probe.node = point.node.clone();
            Ok(probe)
        })
        .collect()
}

fn with_params<'a>(graph: &'a ModelGraph, params: &Parameters) -> Result<std::borrow::Cow<'a, ModelGraph>> {
    if graph.parameters() == params {
        return Ok(std::borrow::Cow::Borrowed(graph));
    }
    let mut g = graph.clone();
    g.load_parameters(params.clone())?;
    Ok(std::borrow::Cow::Owned(g))
}

/// Flattened activations at several probe points for every input row,
/// computed with frozen `params` in chunks of [`EVAL_CHUNK`] rows.
pub fn extract_features_many(
    graph: &ModelGraph,
    params: &Parameters,
    inputs: &Tensor,
    points: &[&str],
) -> Result<Vec<Tensor>> {
    let graph = with_params(graph, params)?;
    let nodes: Vec<&str> = points
        .iter()
        .map(|p| graph.probe_point(p).map(|pp| pp.node.as_str()))
        .collect::<Result<_>>()?;
    let widths: Vec<usize> = nodes
        .iter()
        .map(|n| graph.node_shape(n).map(|s| s.iter().product()))
        .collect::<Result<_>>()?;
    let n = inputs.rows();
    let starts: Vec<usize> = (0..n).step_by(EVAL_CHUNK).collect();
    let chunks: Vec<Vec<Tensor>> = starts
        .par_iter()
        .map(|&start| {
            let x = inputs.slice_rows(start..(start + EVAL_CHUNK).min(n));
            graph.forward_until(&x, &nodes)
        })
        .collect::<Result<_>>()?;
    let mut out: Vec<Vec<f32>> = widths.iter().map(|w| Vec::with_capacity(n * w)).collect();
    for chunk in chunks {
        for (buf, t) in out.iter_mut().zip(chunk) {
            buf.extend_from_slice(t.data());
        }
    }
    out.into_iter()
        .zip(widths)
        .map(|(data, w)| Tensor::new(vec![n, w], data))
        .collect()
}

/// Flattened activations at `point` for every row, paired with the labels.
pub fn extract_features(
    graph: &ModelGraph,
    params: &Parameters,
    inputs: &Tensor,
    labels: &Tensor,
    point: &str,
) -> Result<(Tensor, Tensor)> {
    if labels.rows() != inputs.rows() {
        return Err(Error::shape("extract_features", inputs.shape(), labels.shape()));
    }
    let mut f = extract_features_many(graph, params, inputs, &[point])?;
    Ok((f.remove(0), labels.clone()))
}

/// Outcome of [`train_probe`].
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeHistory {
    /// Validation error after each completed epoch.
    pub validation_errors: Vec<f64>,
    /// Epoch whose parameters were kept; 0 means the starting parameters.
    pub best_epoch: usize,
    pub best_validation_error: f64,
}

impl ProbeHistory {
    pub fn epochs_used(&self) -> usize {
        self.validation_errors.len()
    }
}

/// Trains `(W, b)` with RMSProp on shuffled minibatches, stopping after
/// `max_epochs` or `patience` epochs without a validation improvement, and
/// returns the probe holding the best-validation parameters.
pub fn train_probe(
    mut probe: Probe,
    train_x: &Tensor,
    train_y: &Tensor,
    val_x: &Tensor,
    val_y: &Tensor,
    config: &ProbeTrainConfig,
) -> Result<(Probe, ProbeHistory)> {
    config.validate()?;
    if train_x.rank() == 0 || train_x.rows() == 0 {
        return Err(Error::input("train_probe", "empty training set"));
    }
    probe.check_dims(train_x, train_y)?;
    probe.check_dims(val_x, val_y)?;
    let val_classes = label_indices(val_y)?;
    if config.standardize && probe.standardizer.is_none() {
        probe.standardizer = Some(Standardizer::fit(train_x));
    }
    let mut optimizer = OptimizerState::new(config.optimizer(), &probe.params);
    let mut rng = Rng::new(probe.shuffle_seed);
    let n = train_x.rows();

    let (mut best_err, mut best_loss) = score_against(&probe, val_x, &val_classes)?;
    let mut best_params = probe.params.clone();
    let mut best_epoch = 0;
    let mut history = Vec::new();
    let mut since_best = 0;
    for epoch in 1..=config.max_epochs {
        let order = rng.permutation(n);
        for batch in order.chunks(config.minibatch) {
            let mut x = train_x.gather_rows(batch).into_data();
            if let Some(s) = &probe.standardizer {
                s.apply(&mut x);
            }
            let y = train_y.gather_rows(batch);
            let (loss, grads) = probe.loss_and_grad(&x, &y)?;
            if !loss.is_finite() || !grads.all_finite() {
                return Err(Error::ProbeDiverged {
                    point: probe.point.clone(),
                    epoch,
                });
            }
            optimizer.step(&mut probe.params, &grads)?;
        }
        let (err, loss) = score_against(&probe, val_x, &val_classes)?;
        history.push(err);
        // Validation error moves in steps of 1/n, so equal error with lower
        // loss also counts as progress.
        if err < best_err || (err == best_err && loss < best_loss) {
            best_err = err;
            best_loss = loss;
            best_params = probe.params.clone();
            best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }
    probe.params = best_params;
    probe.optimizer = Some(optimizer);
    Ok((
        probe,
        ProbeHistory {
            validation_errors: history,
            best_epoch,
            best_validation_error: best_err,
        },
    ))
}

fn error_against(probe: &Probe, features: &Tensor, classes: &[usize]) -> Result<f64> {
    if classes.is_empty() {
        return Err(Error::input("eval_probe", "empty evaluation set"));
    }
    let predicted = probe.predict(features)?;
    let wrong = predicted.iter().zip(classes).filter(|(p, c)| p != c).count();
    Ok(wrong as f64 / classes.len() as f64)
}

/// Validation error and mean cross-entropy.
fn score_against(probe: &Probe, features: &Tensor, classes: &[usize]) -> Result<(f64, f64)> {
    if classes.is_empty() {
        return Err(Error::input("eval_probe", "empty evaluation set"));
    }
    let logits = probe.logits(features)?;
    let mut wrong = 0usize;
    let mut loss = 0.0f64;
    for (row, &c) in logits.data().chunks_exact(probe.classes).zip(classes) {
        if argmax(row) != c {
            wrong += 1;
        }
        let m = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
        let lse = m + row.iter().map(|&v| (v as f64 - m).exp()).sum::<f64>().ln();
        loss += lse - row[c] as f64;
    }
    let n = classes.len() as f64;
    Ok((wrong as f64 / n, loss / n))
}

/// Fraction of rows whose argmax prediction differs from the label.
pub fn eval_probe(probe: &Probe, features: &Tensor, labels: &Tensor) -> Result<f64> {
    if features.rank() == 0 || features.rows() == 0 {
        return Err(Error::input("eval_probe", "empty evaluation set"));
    }
    probe.check_dims(features, labels)?;
    error_against(probe, features, &label_indices(labels)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_hot(classes: &[usize], d: usize) -> Tensor {
        Tensor::from_fn(vec![classes.len(), d], |i| (classes[i / d] == i % d) as u8 as f32)
    }

    fn blobs(n: usize, seed: u64) -> (Tensor, Tensor) {
        let mut rng = Rng::new(seed);
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..n {
            let c = i % 2;
            let centre = if c == 0 { -2.0 } else { 2.0 };
            x.push((centre + 0.5 * rng.normal()) as f32);
            x.push((centre + 0.5 * rng.normal()) as f32);
            y.push(c);
        }
        (Tensor::new(vec![n, 2], x).unwrap(), one_hot(&y, 2))
    }

    #[test]
    fn zero_probe_predicts_class_zero() {
        let p = Probe::new("p", 3, 4, 0);
        let x = Tensor::from_fn(vec![6, 4], |i| i as f32);
        let y = one_hot(&[0, 1, 2, 0, 1, 1], 3);
        assert_eq!(p.predict(&x).unwrap(), vec![0; 6]);
        assert!((eval_probe(&p, &x, &y).unwrap() - 4.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn separable_blobs_reach_zero_train_error() {
        let (x, y) = blobs(400, 1);
        let (vx, vy) = blobs(100, 2);
        let config = ProbeTrainConfig {
            minibatch: 32,
            ..Default::default()
        };
        let (p, _) = train_probe(Probe::new("p", 2, 2, 5), &x, &y, &vx, &vy, &config).unwrap();
        assert_eq!(eval_probe(&p, &x, &y).unwrap(), 0.0);
    }

    #[test]
    fn training_is_deterministic() {
        let (x, y) = blobs(300, 3);
        let (vx, vy) = blobs(100, 4);
        let config = ProbeTrainConfig {
            minibatch: 16,
            max_epochs: 8,
            ..Default::default()
        };
        let (a, ha) = train_probe(Probe::new("p", 2, 2, 9), &x, &y, &vx, &vy, &config).unwrap();
        let (b, hb) = train_probe(Probe::new("p", 2, 2, 9), &x, &y, &vx, &vy, &config).unwrap();
        assert_eq!(ha, hb);
        assert_eq!(a.weight(), b.weight());
    }

    #[test]
    fn one_hot_features_give_zero_error() {
        let classes = [0, 1, 2, 3, 2, 1, 0];
        let y = one_hot(&classes, 4);
        let p = Probe::from_parts("p", Tensor::from_fn(vec![4, 4], |i| (i % 5 == 0) as u8 as f32), Tensor::zeros(vec![4]))
            .unwrap();
        assert_eq!(eval_probe(&p, &y, &y).unwrap(), 0.0);
    }

    #[test]
    fn rejects_empty_and_mismatched_sets() {
        let p = Probe::new("p", 2, 3, 0);
        let empty = Tensor::zeros(vec![0, 3]);
        assert!(eval_probe(&p, &empty, &Tensor::zeros(vec![0, 2])).is_err());
        let x = Tensor::zeros(vec![2, 4]);
        assert!(eval_probe(&p, &x, &one_hot(&[0, 1], 2)).is_err());
        let config = ProbeTrainConfig::default();
        let vx = Tensor::zeros(vec![1, 3]);
        let vy = one_hot(&[0], 2);
        assert!(train_probe(p, &empty, &Tensor::zeros(vec![0, 2]), &vx, &vy, &config).is_err());
    }

    #[test]
    fn standardizer_uses_one_scale_per_point() {
        // Column 0 is constant, column 1 has spread 2, column 2 spread 1e-4.
        let x = Tensor::new(vec![2, 3], vec![3.0, -2.0, 0.0, 3.0, 2.0, 2e-4]).unwrap();
        let s = Standardizer::fit(&x);
        let mut rows = x.data().to_vec();
        s.apply(&mut rows);
        let rms = (rows.iter().map(|v| (*v as f64).powi(2)).sum::<f64>() / 6.0).sqrt();
        assert!((rms - 1.0).abs() < 1e-6);
        assert_eq!(rows[0], 0.0);
        assert!(rows[2].abs() < 1e-3, "tiny feature stays tiny");
        let constant = Standardizer::fit(&Tensor::zeros(vec![3, 2]));
        assert_eq!(constant.scale, 1.0);
    }
}
