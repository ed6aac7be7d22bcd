//! Layer graphs: topology, parameters, execution and architectural edits.
//!
//! A [`ModelGraph`] is an ordered list of [`NodeSpec`]s. Every node may only
//! consume nodes listed before it, so the insertion order is a topological
//! order and is fixed once the graph is assembled. Loss heads are linear
//! classifiers trained jointly with the trunk; probes are never part of a
//! graph.

mod build;
mod exec;

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{fnv1a, Rng};
use crate::tensor::{conv_output_dims, Element, Padding, Tensor};

pub use build::{
    add_auxiliary_head, add_skip_concat, build_mlp, build_mnist_convnet, glorot_normal_init,
    MNIST_PROBE_POINTS,
};
pub use exec::{Activations, BackwardOutput};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NodeKind {
    /// Per-example shape of the data fed to the graph.
    Input { shape: Vec<usize> },
    /// Fully connected layer over the flattened input.
    Affine { units: usize },
    /// Square-kernel convolution over NHWC input.
    Conv {
        kernel: usize,
        filters: usize,
        stride: usize,
        padding: Padding,
    },
    /// LeakyReLU; `alpha = 0` is a plain ReLU.
    Activation { alpha: f32 },
    Pool { window: usize, stride: usize },
    /// Concatenation of the flattened inputs, in input order.
    Concat,
    /// Linear classifier whose softmax cross-entropy, scaled by `weight`, is
    /// part of the training loss.
    LossHead { classes: usize, weight: f32 },
}

impl NodeKind {
    fn has_params(&self) -> bool {
        matches!(
            self,
            NodeKind::Affine { .. } | NodeKind::Conv { .. } | NodeKind::LossHead { .. }
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub id: String,
    pub kind: NodeKind,
    pub inputs: Vec<String>,
}

impl NodeSpec {
    pub fn new(id: impl Into<String>, kind: NodeKind, inputs: &[&str]) -> Self {
        NodeSpec {
            id: id.into(),
            kind,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
        }
    }
}

/// A named place where activations are exposed to probes. Several points may
/// alias the same node.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbePoint {
    pub name: String,
    pub node: String,
}

impl ProbePoint {
    pub fn new(name: impl Into<String>, node: impl Into<String>) -> Self {
        ProbePoint {
            name: name.into(),
            node: node.into(),
        }
    }
}

/// Named parameter tensors, keyed `"{node}/{param}"`.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters<T: Element = f32> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Element> Default for Parameters<T> {
    fn default() -> Self {
        Parameters {
            tensors: BTreeMap::new(),
        }
    }
}

impl<T: Element> Parameters<T> {
    pub fn key(node: &str, param: &str) -> String {
        format!("{node}/{param}")
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Option<Tensor<T>> {
        self.tensors.insert(name.into(), tensor)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<T>> {
        self.tensors.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn cast<U: Element>(&self) -> Parameters<U> {
        Parameters {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::all_finite)
    }
}

impl Parameters<f32> {
    /// FNV-1a over names, shapes and raw bits; equal checksums for
    /// bit-identical parameter sets.
    pub fn checksum(&self) -> u64 {
        let mut bytes = Vec::new();
        for (name, t) in &self.tensors {
            bytes.extend_from_slice(name.as_bytes());
            for &d in t.shape() {
                bytes.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                bytes.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        fnv1a(&bytes)
    }
}

impl<T: Element> FromIterator<(String, Tensor<T>)> for Parameters<T> {
    fn from_iter<I: IntoIterator<Item = (String, Tensor<T>)>>(iter: I) -> Self {
        Parameters {
            tensors: iter.into_iter().collect(),
        }
    }
}

/// Shape and Glorot fans of one parameter a node needs.
#[derive(Debug, Clone)]
struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    fan_in: usize,
    fan_out: usize,
    is_bias: bool,
}

#[derive(Debug, Clone)]
pub struct ModelGraph<T: Element = f32> {
    nodes: Vec<NodeSpec>,
    index: HashMap<String, usize>,
    inputs: Vec<Vec<usize>>,
    shapes: Vec<Vec<usize>>,
    grad_needed: Vec<bool>,
    param_specs: Vec<Vec<ParamSpec>>,
    params: Parameters<T>,
    probe_points: Vec<ProbePoint>,
}

struct Topology {
    index: HashMap<String, usize>,
    inputs: Vec<Vec<usize>>,
    shapes: Vec<Vec<usize>>,
    grad_needed: Vec<bool>,
    param_specs: Vec<Vec<ParamSpec>>,
}

fn graph_err(msg: impl Into<String>) -> Error {
    Error::Graph(msg.into())
}

fn analyze(nodes: &[NodeSpec], probe_points: &[ProbePoint]) -> Result<Topology> {
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut inputs = Vec::with_capacity(nodes.len());
    let mut shapes: Vec<Vec<usize>> = Vec::with_capacity(nodes.len());
    let mut grad_needed = Vec::with_capacity(nodes.len());
    let mut param_specs = Vec::with_capacity(nodes.len());
    let mut input_nodes = 0;
    let mut heads = 0;

    for (i, node) in nodes.iter().enumerate() {
        if node.id.is_empty() {
            return Err(graph_err(format!("node {i} has an empty id")));
        }
        if index.contains_key(&node.id) {
            return Err(graph_err(format!("duplicate node id `{}`", node.id)));
        }
        let mut ins: Vec<usize> = Vec::with_capacity(node.inputs.len());
        for src in &node.inputs {
            match index.get(src) {
                Some(&j) => ins.push(j),
                None if nodes.iter().any(|n| &n.id == src) => {
                    return Err(graph_err(format!(
                        "node `{}` consumes `{src}` which comes later (cycle or bad order)",
                        node.id
                    )))
                }
                None => return Err(Error::UnknownNode(src.clone())),
            }
        }
        let arity_ok = match node.kind {
            NodeKind::Input { .. } => ins.is_empty(),
            NodeKind::Concat => ins.len() >= 2,
            _ => ins.len() == 1,
        };
        if !arity_ok {
            return Err(graph_err(format!(
                "node `{}` has {} inputs, which its kind does not accept",
                node.id,
                ins.len()
            )));
        }
        let in_shape = |k: usize| -> &[usize] { shapes[ins[k]].as_slice() };
        let flat = |k: usize| -> usize { shapes[ins[k]].iter().product::<usize>() };
        let bad = |what: &str| graph_err(format!("node `{}`: {what}", node.id));
        let mut specs = Vec::new();
        let mut param = |name: &str, shape: Vec<usize>, fan_in: usize, fan_out: usize, is_bias| {
            specs.push(ParamSpec {
                name: Parameters::<T0>::key(&node.id, name),
                shape,
                fan_in,
                fan_out,
                is_bias,
            })
        };
        type T0 = f32;
        let shape = match &node.kind {
            NodeKind::Input { shape } => {
                input_nodes += 1;
                if shape.is_empty() || shape.contains(&0) {
                    return Err(bad("input shape must have positive dimensions"));
                }
                shape.clone()
            }
            NodeKind::Affine { units } | NodeKind::LossHead { classes: units, .. } => {
                if *units == 0 {
                    return Err(bad("needs at least one output unit"));
                }
                if let NodeKind::LossHead { weight, .. } = node.kind {
                    heads += 1;
                    if !(weight.is_finite() && weight > 0.0) {
                        return Err(bad("loss head weight must be positive"));
                    }
                }
                let fan_in = flat(0);
                param("weight", vec![fan_in, *units], fan_in, *units, false);
                param("bias", vec![*units], fan_in, *units, true);
                vec![*units]
            }
            NodeKind::Conv {
                kernel,
                filters,
                stride,
                padding,
            } => {
                let &[h, w, c] = in_shape(0) else {
                    return Err(bad("convolution needs an [h, w, c] input"));
                };
                if *filters == 0 || *stride == 0 {
                    return Err(bad("filters and stride must be positive"));
                }
                let (oh, _) = conv_output_dims(h, *kernel, *stride, *padding)
                    .ok_or_else(|| bad("kernel does not fit the input"))?;
                let (ow, _) = conv_output_dims(w, *kernel, *stride, *padding)
                    .ok_or_else(|| bad("kernel does not fit the input"))?;
                let fan_in = kernel * kernel * c;
                let fan_out = kernel * kernel * filters;
                param("kernel", vec![*kernel, *kernel, c, *filters], fan_in, fan_out, false);
                param("bias", vec![*filters], fan_in, fan_out, true);
                vec![oh, ow, *filters]
            }
            NodeKind::Activation { alpha } => {
                if !(0.0..=1.0).contains(alpha) {
                    return Err(bad("activation alpha must lie in [0, 1]"));
                }
                in_shape(0).to_vec()
            }
            NodeKind::Pool { window, stride } => {
                let &[h, w, c] = in_shape(0) else {
                    return Err(bad("pooling needs an [h, w, c] input"));
                };
                if *window == 0 || *stride == 0 || *window > h || *window > w {
                    return Err(bad("pooling window does not fit the input"));
                }
                vec![(h - window) / stride + 1, (w - window) / stride + 1, c]
            }
            NodeKind::Concat => vec![(0..ins.len()).map(flat).sum()],
        };
        let needs = node.kind.has_params() || ins.iter().any(|&j| grad_needed[j]);
        index.insert(node.id.clone(), i);
        inputs.push(ins);
        shapes.push(shape);
        grad_needed.push(needs);
        param_specs.push(specs);
    }
    if input_nodes != 1 {
        return Err(graph_err(format!("expected exactly one input node, found {input_nodes}")));
    }
    if heads == 0 {
        return Err(graph_err("graph has no loss head"));
    }
    let mut names = HashSet::new();
    for p in probe_points {
        if !index.contains_key(&p.node) {
            return Err(Error::UnknownNode(p.node.clone()));
        }
        if !names.insert(p.name.as_str()) {
            return Err(graph_err(format!("duplicate probe point `{}`", p.name)));
        }
    }
    Ok(Topology {
        index,
        inputs,
        shapes,
        grad_needed,
        param_specs,
    })
}

impl ModelGraph<f32> {
    /// Assembles a graph, drawing Glorot-normal weights and zero biases for
    /// every parameter not already present in `existing`.
    pub fn assemble(
        nodes: Vec<NodeSpec>,
        probe_points: Vec<ProbePoint>,
        mut existing: Parameters,
        rng: &mut Rng,
    ) -> Result<Self> {
        let topo = analyze(&nodes, &probe_points)?;
        let mut params = Parameters::default();
        for spec in topo.param_specs.iter().flatten() {
            let tensor = match existing.remove(&spec.name) {
                Some(t) if t.shape() == spec.shape.as_slice() => t,
                Some(t) => {
                    return Err(Error::ParameterMismatch(format!(
                        "`{}` has shape {:?}, graph needs {:?}",
                        spec.name,
                        t.shape(),
                        spec.shape
                    )))
                }
                None if spec.is_bias => Tensor::zeros(spec.shape.clone()),
                None => build::glorot_normal(&spec.shape, spec.fan_in, spec.fan_out, rng),
            };
            params.insert(spec.name.clone(), tensor);
        }
        if let Some(orphan) = existing.names().next() {
            return Err(Error::ParameterMismatch(format!(
                "`{orphan}` does not belong to any node"
            )));
        }
        Ok(Self::from_topology(nodes, probe_points, topo, params))
    }
}

impl<T: Element> ModelGraph<T> {
    /// Graph with exactly the given parameters (no initialization).
    pub fn from_parts(
        nodes: Vec<NodeSpec>,
        probe_points: Vec<ProbePoint>,
        params: Parameters<T>,
    ) -> Result<Self> {
        let topo = analyze(&nodes, &probe_points)?;
        let graph = Self::from_topology(nodes, probe_points, topo, Parameters::default());
        graph.check_parameters(&params)?;
        Ok(ModelGraph { params, ..graph })
    }

    fn from_topology(
        nodes: Vec<NodeSpec>,
        probe_points: Vec<ProbePoint>,
        topo: Topology,
        params: Parameters<T>,
    ) -> Self {
        ModelGraph {
            nodes,
            index: topo.index,
            inputs: topo.inputs,
            shapes: topo.shapes,
            grad_needed: topo.grad_needed,
            param_specs: topo.param_specs,
            params,
            probe_points,
        }
    }

    pub fn nodes(&self) -> &[NodeSpec] {
        &self.nodes
    }

    pub fn node(&self, id: &str) -> Option<&NodeSpec> {
        self.index.get(id).map(|&i| &self.nodes[i])
    }

    pub fn node_index(&self, id: &str) -> Result<usize> {
        self.index
            .get(id)
            .copied()
            .ok_or_else(|| Error::UnknownNode(id.to_string()))
    }

    /// Per-example output shape of a node.
    pub fn node_shape(&self, id: &str) -> Result<&[usize]> {
        Ok(&self.shapes[self.node_index(id)?])
    }

    pub fn input_shape(&self) -> &[usize] {
        let i = self
            .nodes
            .iter()
            .position(|n| matches!(n.kind, NodeKind::Input { .. }))
            .expect("assembled graphs have an input node");
        &self.shapes[i]
    }

    pub fn probe_points(&self) -> &[ProbePoint] {
        &self.probe_points
    }

    pub fn probe_point(&self, name: &str) -> Result<&ProbePoint> {
        self.probe_points
            .iter()
            .find(|p| p.name == name)
            .ok_or_else(|| Error::UnknownProbePoint(name.to_string()))
    }

    /// `(node id, weight)` of every loss head in graph order.
    pub fn loss_heads(&self) -> Vec<(String, f32)> {
        self.nodes
            .iter()
            .filter_map(|n| match n.kind {
                NodeKind::LossHead { weight, .. } => Some((n.id.clone(), weight)),
                _ => None,
            })
            .collect()
    }

    /// The last loss head in graph order, treated as the model's own
    /// classifier.
    pub fn main_head(&self) -> String {
        self.loss_heads()
            .pop()
            .map(|(id, _)| id)
            .expect("assembled graphs have a loss head")
    }

    pub fn parameters(&self) -> &Parameters<T> {
        &self.params
    }

    /// Names and shapes must match the graph exactly.
    pub fn check_parameters(&self, params: &Parameters<T>) -> Result<()> {
        let mut expected = 0;
        for spec in self.param_specs.iter().flatten() {
            expected += 1;
            match params.get(&spec.name) {
                Some(t) if t.shape() == spec.shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::ParameterMismatch(format!(
                        "`{}` has shape {:?}, graph needs {:?}",
                        spec.name,
                        t.shape(),
                        spec.shape
                    )))
                }
                None => {
                    return Err(Error::ParameterMismatch(format!("missing `{}`", spec.name)))
                }
            }
        }
        if params.len() != expected {
            let orphan = params
                .names()
                .find(|n| !self.param_specs.iter().flatten().any(|s| s.name == *n))
                .unwrap_or_default();
            return Err(Error::ParameterMismatch(format!(
                "`{orphan}` does not belong to any node"
            )));
        }
        Ok(())
    }

    /// Replaces all parameters (e.g. from a checkpoint) after validation.
    pub fn load_parameters(&mut self, params: Parameters<T>) -> Result<()> {
        self.check_parameters(&params)?;
        self.params = params;
        Ok(())
    }

    pub fn cast<U: Element>(&self) -> ModelGraph<U> {
        ModelGraph {
            nodes: self.nodes.clone(),
            index: self.index.clone(),
            inputs: self.inputs.clone(),
            shapes: self.shapes.clone(),
            grad_needed: self.grad_needed.clone(),
            param_specs: self.param_specs.clone(),
            params: self.params.cast(),
            probe_points: self.probe_points.clone(),
        }
    }

    /// Checks that every id is unique, every input exists and precedes its
    /// consumer, and that the parameter set has no missing or orphan entries.
    pub fn validate(&self) -> Result<()> {
        analyze(&self.nodes, &self.probe_points)?;
        self.check_parameters(&self.params)
    }

    pub(crate) fn parts(&self) -> (Vec<NodeSpec>, Vec<ProbePoint>) {
        (self.nodes.clone(), self.probe_points.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_nodes() -> Vec<NodeSpec> {
        vec![
            NodeSpec::new("input", NodeKind::Input { shape: vec![3] }, &[]),
            NodeSpec::new("fc", NodeKind::Affine { units: 2 }, &["input"]),
            NodeSpec::new("head", NodeKind::LossHead { classes: 2, weight: 1.0 }, &["fc"]),
        ]
    }

    #[test]
    fn assemble_initializes_parameters() {
        let g = ModelGraph::assemble(tiny_nodes(), vec![], Parameters::default(), &mut Rng::new(1))
            .unwrap();
        assert_eq!(g.parameters().len(), 4);
        assert_eq!(g.parameters().get("fc/weight").unwrap().shape(), &[3, 2]);
        assert!(g.parameters().get("fc/bias").unwrap().data().iter().all(|&v| v == 0.0));
        g.validate().unwrap();
    }

    #[test]
    fn rejects_duplicates_unknown_and_forward_references() {
        let mut nodes = tiny_nodes();
        nodes.push(NodeSpec::new("fc", NodeKind::Activation { alpha: 0.0 }, &["input"]));
        assert!(matches!(analyze(&nodes, &[]), Err(Error::Graph(_))));

        let mut nodes = tiny_nodes();
        nodes[1].inputs = vec!["missing".into()];
        assert!(matches!(analyze(&nodes, &[]), Err(Error::UnknownNode(_))));

        let mut nodes = tiny_nodes();
        nodes[1].inputs = vec!["head".into()];
        assert!(matches!(analyze(&nodes, &[]), Err(Error::Graph(_))));
    }

    #[test]
    fn requires_a_loss_head() {
        let nodes = tiny_nodes()[..2].to_vec();
        assert!(analyze(&nodes, &[]).is_err());
    }

    #[test]
    fn orphan_and_missing_parameters_are_rejected() {
        let g = ModelGraph::assemble(tiny_nodes(), vec![], Parameters::default(), &mut Rng::new(1))
            .unwrap();
        let mut extra = g.parameters().clone();
        extra.insert("ghost/weight", Tensor::zeros(vec![1]));
        assert!(g.check_parameters(&extra).is_err());
        let mut missing = g.parameters().clone();
        missing.remove("fc/bias");
        assert!(g.check_parameters(&missing).is_err());
    }

    #[test]
    fn checksum_tracks_bits() {
        let g = ModelGraph::assemble(tiny_nodes(), vec![], Parameters::default(), &mut Rng::new(1))
            .unwrap();
        let mut p = g.parameters().clone();
        let before = p.checksum();
        p.get_mut("fc/bias").unwrap().data_mut()[0] = -0.0;
        assert_ne!(before, p.checksum());
    }
}
