//! Probing one checkpoint: feature extraction under a memory budget, probe
//! training per activation and a single streaming pass over the test split.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::data::{Dataset, LabeledSet};
use crate::error::{Error, Result};
use crate::graph::ModelGraph;
use crate::par::*;
use crate::probe::{attach_probes, eval_probe, label_indices, train_probe, Probe, ProbeTrainConfig, EVAL_CHUNK};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Limits on the activations held in memory while probing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeBudget {
    /// Upper bound on probe training rows per point.
    pub max_train_rows: usize,
    /// Upper bound on stored feature values (train plus validation) for the
    /// points extracted together; a single point never exceeds it either.
    pub max_floats: usize,
}

impl Default for ProbeBudget {
    fn default() -> Self {
        ProbeBudget {
            max_train_rows: 50_000,
            max_floats: 1 << 28,
        }
    }
}

impl ProbeBudget {
    pub fn validate(&self) -> Result<()> {
        if self.max_train_rows == 0 || self.max_floats == 0 {
            return Err(Error::Config("probe budget limits must be positive".into()));
        }
        Ok(())
    }

    /// Training and validation rows for a point with `width` features.
    pub fn rows_for(
        &self,
        width: usize,
        train_available: usize,
        val_available: usize,
        config: &ProbeTrainConfig,
    ) -> (usize, usize) {
        let cap = (self.max_floats / width.max(1)).max(2);
        let val = val_available.min(config.validation_size).min((cap / 5).max(1));
        let train = train_available.min(self.max_train_rows).min((cap - val).max(1));
        (train, val)
    }
}

/// One probed activation (shared by every probe point aliasing its node).
#[derive(Debug, Clone)]
pub(super) struct NodeResult {
    pub node: String,
    pub train_error: f64,
    pub test_error: f64,
    pub epochs_used: usize,
    pub probe: Probe,
}

pub(super) struct SuiteRequest<'a> {
    pub graph: &'a ModelGraph,
    pub data: &'a Dataset,
    /// Distinct nodes to probe, in graph order, each with one point name.
    pub nodes: &'a [(String, String)],
    pub config: &'a ProbeTrainConfig,
    pub budget: &'a ProbeBudget,
    /// Fixed orders of the training and validation rows; probes use prefixes.
    pub train_order: &'a [usize],
    pub val_order: &'a [usize],
    pub rng: Rng,
    pub warm: Option<&'a HashMap<String, Probe>>,
}

/// Flattened activations of `nodes` for rows `order[..rows[i]]`.
fn extract_prefixes(
    graph: &ModelGraph,
    inputs: &Tensor,
    order: &[usize],
    nodes: &[&str],
    rows: &[usize],
) -> Result<Vec<Tensor>> {
    let widths: Vec<usize> = nodes
        .iter()
        .map(|n| graph.node_shape(n).map(|s| s.iter().product()))
        .collect::<Result<_>>()?;
    let total = rows.iter().copied().max().unwrap_or(0);
    let mut bufs: Vec<Vec<f32>> = rows.iter().zip(&widths).map(|(r, w)| Vec::with_capacity(r * w)).collect();
    let starts: Vec<usize> = (0..total).step_by(EVAL_CHUNK).collect();
    let window = 2 * current_num_threads().max(1);
    for group in starts.chunks(window) {
        let outs: Vec<Vec<Tensor>> = group
            .par_iter()
            .map(|&start| {
                let end = (start + EVAL_CHUNK).min(total);
                let x = inputs.gather_rows(&order[start..end]);
                graph.forward_until(&x, nodes)
            })
            .collect::<Result<_>>()?;
        for (&start, out) in group.iter().zip(outs) {
            for (i, t) in out.into_iter().enumerate() {
                if start < rows[i] {
                    let keep = (rows[i] - start).min(t.rows());
                    bufs[i].extend_from_slice(&t.data()[..keep * widths[i]]);
                }
            }
        }
    }
    bufs.into_iter()
        .zip(rows.iter().zip(&widths))
        .map(|(data, (&r, &w))| Tensor::new(vec![r, w], data))
        .collect()
}

fn prefix_labels(set: &LabeledSet, order: &[usize], rows: usize) -> Tensor {
    set.labels.gather_rows(&order[..rows])
}

/// Test-split error of every probe from one streaming forward pass.
fn test_errors(graph: &ModelGraph, test: &LabeledSet, probes: &[&Probe]) -> Result<Vec<f64>> {
    let classes = label_indices(&test.labels)?;
    let nodes: Vec<&str> = probes.iter().map(|p| p.node()).collect();
    let n = test.len();
    let starts: Vec<usize> = (0..n).step_by(EVAL_CHUNK).collect();
    let window = 2 * current_num_threads().max(1);
    let mut wrong = vec![0usize; probes.len()];
    for group in starts.chunks(window) {
        let counts: Vec<Vec<usize>> = group
            .par_iter()
            .map(|&start| -> Result<Vec<usize>> {
                let end = (start + EVAL_CHUNK).min(n);
                let feats = graph.forward_until(&test.inputs.slice_rows(start..end), &nodes)?;
                probes
                    .iter()
                    .zip(&feats)
                    .map(|(p, f)| {
                        let pred = p.predict(&f.clone().flatten_rows())?;
                        Ok(pred.iter().zip(&classes[start..end]).filter(|(a, b)| a != b).count())
                    })
                    .collect()
            })
            .collect::<Result<_>>()?;
        for c in counts {
            for (w, v) in wrong.iter_mut().zip(c) {
                *w += v;
            }
        }
    }
    Ok(wrong.into_iter().map(|w| w as f64 / n as f64).collect())
}

pub(super) fn run_suite(req: SuiteRequest<'_>) -> Result<Vec<NodeResult>> {
    let SuiteRequest {
        graph,
        data,
        nodes,
        config,
        budget,
        train_order,
        val_order,
        mut rng,
        warm,
    } = req;
    let classes = data.classes();
    let point_names: Vec<&str> = nodes.iter().map(|(_, p)| p.as_str()).collect();
    let fresh = attach_probes(graph, &point_names, classes, &mut rng)?;

    struct Plan {
        width: usize,
        train: usize,
        val: usize,
    }
    let plans: Vec<Plan> = nodes
        .iter()
        .map(|(node, _)| {
            let width: usize = graph.node_shape(node)?.iter().product();
            let (train, val) = budget.rows_for(width, train_order.len(), val_order.len(), config);
            Ok(Plan { width, train, val })
        })
        .collect::<Result<_>>()?;

    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut used = 0usize;
    for (i, p) in plans.iter().enumerate() {
        let cost = (p.train + p.val) * p.width;
        match groups.last_mut() {
            Some(g) if used + cost <= budget.max_floats => {
                g.push(i);
                used += cost;
            }
            _ => {
                groups.push(vec![i]);
                used = cost;
            }
        }
    }

    let mut trained: Vec<Option<(Probe, f64, usize)>> = vec![None; nodes.len()];
    for group in groups {
        let ids: Vec<&str> = group.iter().map(|&i| nodes[i].0.as_str()).collect();
        let train_rows: Vec<usize> = group.iter().map(|&i| plans[i].train).collect();
        let val_rows: Vec<usize> = group.iter().map(|&i| plans[i].val).collect();
        let train_x = extract_prefixes(graph, &data.train.inputs, train_order, &ids, &train_rows)?;
        let val_x = extract_prefixes(graph, &data.validation.inputs, val_order, &ids, &val_rows)?;
        let jobs: Vec<(usize, Tensor, Tensor)> = group.iter().copied().zip(train_x).zip(val_x).map(|((i, t), v)| (i, t, v)).collect();
        let results: Vec<(usize, Probe, f64, usize)> = jobs
            .par_iter()
            .map(|(i, tx, vx)| {
                let i = *i;
                let ty = prefix_labels(&data.train, train_order, plans[i].train);
                let vy = prefix_labels(&data.validation, val_order, plans[i].val);
                let start = match (config.warm_start, warm.and_then(|w| w.get(&nodes[i].0))) {
                    (true, Some(p)) => p.clone(),
                    _ => fresh[i].clone(),
                };
                let (probe, history) = train_probe(start, tx, &ty, vx, &vy, config)?;
                let train_error = eval_probe(&probe, tx, &ty)?;
                Ok((i, probe, train_error, history.epochs_used()))
            })
            .collect::<Result<_>>()?;
        for (i, probe, err, epochs) in results {
            trained[i] = Some((probe, err, epochs));
        }
    }

    let trained: Vec<(Probe, f64, usize)> =
        trained.into_iter().map(|t| t.expect("every node is trained")).collect();
    let probes: Vec<&Probe> = trained.iter().map(|t| &t.0).collect();
    let test = test_errors(graph, &data.test, &probes)?;
    Ok(trained
        .into_iter()
        .zip(test)
        .zip(nodes)
        .map(|(((probe, train_error, epochs_used), test_error), (node, _))| NodeResult {
            node: node.clone(),
            train_error,
            test_error,
            epochs_used,
            probe,
        })
        .collect())
}
