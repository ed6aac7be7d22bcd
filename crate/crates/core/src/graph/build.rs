use super::{ModelGraph, NodeKind, NodeSpec, Parameters, ProbePoint};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Padding, Tensor};

pub(super) fn glorot_normal(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut Rng) -> Tensor {
    let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(shape.to_vec(), |_| (rng.normal() * std) as f32)
}

/// A `[fan_in, fan_out]` matrix of draws from `N(0, 2 / (fan_in + fan_out))`.
///
/// # Panics
/// If either fan is zero.
pub fn glorot_normal_init(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Tensor {
    assert!(fan_in >= 1 && fan_out >= 1, "glorot_normal_init: fans must be positive");
    glorot_normal(&[fan_in, fan_out], fan_in, fan_out, rng)
}

/// `input -> depth x (affine(width) -> LeakyReLU(alpha)) -> head`.
///
/// Nodes are `input`, `fc{k}`, `act{k}` for `k = 1..=depth` and `head`.
/// Probe points `layer0` (the input) through `layer{depth}` sit after each
/// activation.
pub fn build_mlp(
    input_dim: usize,
    depth: usize,
    width: usize,
    alpha: f32,
    classes: usize,
    rng: &mut Rng,
) -> Result<ModelGraph> {
    if input_dim == 0 || depth == 0 || width == 0 || classes == 0 {
        return Err(Error::Graph(
            "mlp needs positive input size, depth, width and class count".into(),
        ));
    }
    let mut nodes = vec![NodeSpec::new("input", NodeKind::Input { shape: vec![input_dim] }, &[])];
    let mut probes = vec![ProbePoint::new("layer0", "input")];
    let mut prev = "input".to_string();
    for k in 1..=depth {
        let fc = format!("fc{k}");
        let act = format!("act{k}");
        nodes.push(NodeSpec::new(&fc, NodeKind::Affine { units: width }, &[&prev]));
        nodes.push(NodeSpec::new(&act, NodeKind::Activation { alpha }, &[&fc]));
        probes.push(ProbePoint::new(format!("layer{k}"), &act));
        prev = act;
    }
    nodes.push(NodeSpec::new("head", NodeKind::LossHead { classes, weight: 1.0 }, &[&prev]));
    ModelGraph::assemble(nodes, probes, Parameters::default(), rng)
}

/// Probe point names of [`build_mnist_convnet`], input side first.
pub const MNIST_PROBE_POINTS: [&str; 13] = [
    "input",
    "conv1_in",
    "conv1_out",
    "relu1_out",
    "pool1_out",
    "conv2_in",
    "conv2_out",
    "relu2_out",
    "pool2_out",
    "fc1_in",
    "fc1_preact",
    "fc1_postact",
    "logits",
];

/// Two 5x5 same-padded conv/ReLU/maxpool stages, a 512-unit ReLU layer and
/// a 10-way head, on 28x28x1 images.
pub fn build_mnist_convnet(rng: &mut Rng) -> Result<ModelGraph> {
    let conv = |filters| NodeKind::Conv {
        kernel: 5,
        filters,
        stride: 1,
        padding: Padding::Same,
    };
    let relu = NodeKind::Activation { alpha: 0.0 };
    let pool = NodeKind::Pool { window: 2, stride: 2 };
    let nodes = vec![
        NodeSpec::new("input", NodeKind::Input { shape: vec![28, 28, 1] }, &[]),
        NodeSpec::new("conv1", conv(32), &["input"]),
        NodeSpec::new("relu1", relu.clone(), &["conv1"]),
        NodeSpec::new("pool1", pool.clone(), &["relu1"]),
        NodeSpec::new("conv2", conv(64), &["pool1"]),
        NodeSpec::new("relu2", relu.clone(), &["conv2"]),
        NodeSpec::new("pool2", pool, &["relu2"]),
        NodeSpec::new("fc1", NodeKind::Affine { units: 512 }, &["pool2"]),
        NodeSpec::new("fc1_relu", relu, &["fc1"]),
        NodeSpec::new("logits", NodeKind::LossHead { classes: 10, weight: 1.0 }, &["fc1_relu"]),
    ];
    let aliases = [
        "input", "input", "conv1", "relu1", "pool1", "pool1", "conv2", "relu2", "pool2", "pool2",
        "fc1", "fc1_relu", "logits",
    ];
    let probes = MNIST_PROBE_POINTS
        .iter()
        .zip(aliases)
        .map(|(name, node)| ProbePoint::new(*name, node))
        .collect();
    ModelGraph::assemble(nodes, probes, Parameters::default(), rng)
}

/// Adds a trainable linear classifier `{node_id}_aux` on top of `node_id`.
/// Its weighted cross-entropy joins the training loss and its gradient
/// reaches the trunk. The head is placed right after `node_id` so the
/// original final head stays last.
pub fn add_auxiliary_head(
    graph: ModelGraph,
    node_id: &str,
    classes: usize,
    weight: f32,
    rng: &mut Rng,
) -> Result<ModelGraph> {
    if !(weight.is_finite() && weight > 0.0) {
        return Err(Error::Graph(format!(
            "auxiliary head weight must be positive, got {weight}"
        )));
    }
    let at = graph.node_index(node_id)?;
    let params = graph.parameters().clone();
    let (mut nodes, probes) = graph.parts();
    let id = format!("{node_id}_aux");
    nodes.insert(
        at + 1,
        NodeSpec::new(&id, NodeKind::LossHead { classes, weight }, &[node_id]),
    );
    ModelGraph::assemble(nodes, probes, params, rng)
}

/// Makes the affine layer `to_id` consume `concat(previous input, from_id)`
/// through a new node `{to_id}_skip`, redrawing its weights for the larger
/// fan-in.
pub fn add_skip_concat(graph: ModelGraph, from_id: &str, to_id: &str, rng: &mut Rng) -> Result<ModelGraph> {
    let from = graph.node_index(from_id)?;
    let to = graph.node_index(to_id)?;
    if from >= to {
        return Err(Error::Graph(format!(
            "skip from `{from_id}` to `{to_id}` would create a cycle"
        )));
    }
    if !matches!(graph.nodes()[to].kind, NodeKind::Affine { .. }) {
        return Err(Error::Graph(format!("skip target `{to_id}` is not an affine layer")));
    }
    let mut params = graph.parameters().clone();
    params.remove(&Parameters::<f32>::key(to_id, "weight"));
    let (mut nodes, probes) = graph.parts();
    let skip = format!("{to_id}_skip");
    let previous = nodes[to].inputs[0].clone();
    nodes[to].inputs = vec![skip.clone()];
    nodes.insert(to, NodeSpec::new(&skip, NodeKind::Concat, &[&previous, from_id]));
    ModelGraph::assemble(nodes, probes, params, rng)
}
