use super::{ModelGraph, NodeKind, Parameters};
use crate::error::{Error, Result};
use crate::optim::OptimizerState;
use crate::tensor::{
    affine, affine_backward, concat, conv2d, conv2d_backward, leaky_relu, leaky_relu_backward,
    maxpool2d_backward, maxpool2d_with_argmax, softmax_cross_entropy, split, Element, Tensor,
};

/// Node outputs of one forward pass, indexed like the graph's nodes.
#[derive(Debug, Clone)]
pub struct Activations<T: Element = f32> {
    ids: Vec<String>,
    values: Vec<Option<Tensor<T>>>,
    argmax: Vec<Option<Vec<u32>>>,
    evaluations: Vec<u32>,
}

impl<T: Element> Activations<T> {
    pub fn get(&self, id: &str) -> Option<&Tensor<T>> {
        let i = self.ids.iter().position(|n| n == id)?;
        self.values[i].as_ref()
    }

    /// Number of node outputs held.
    pub fn len(&self) -> usize {
        self.values.iter().filter(|v| v.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.ids
            .iter()
            .zip(&self.values)
            .filter_map(|(id, v)| v.as_ref().map(|t| (id.as_str(), t)))
    }

    /// How many times each node was evaluated during the pass, in node order.
    pub fn evaluation_counts(&self) -> impl Iterator<Item = (&str, u32)> {
        self.ids.iter().map(String::as_str).zip(self.evaluations.iter().copied())
    }
}

#[derive(Debug, Clone)]
pub struct BackwardOutput<T: Element = f32> {
    /// `sum_i weight_i * head_loss_i`.
    pub total_loss: f64,
    /// Unweighted mean cross-entropy of each loss head, in graph order.
    pub head_losses: Vec<(String, f64)>,
    /// One gradient per parameter.
    pub grads: Parameters<T>,
}

impl<T: Element> ModelGraph<T> {
    fn weight(&self, i: usize) -> &Tensor<T> {
        let name = &self.param_specs[i][0].name;
        self.params.get(name).expect("parameters are validated at assembly")
    }

    fn bias(&self, i: usize) -> &Tensor<T> {
        let name = &self.param_specs[i][1].name;
        self.params.get(name).expect("parameters are validated at assembly")
    }

    fn check_batch(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let shape = self.input_shape();
        let per_example: usize = shape.iter().product();
        if x.rank() == 0 || x.rows() == 0 || x.row_len() != per_example {
            let input = self.nodes.iter().find(|n| matches!(n.kind, NodeKind::Input { .. }));
            let id = input.map(|n| n.id.as_str()).unwrap_or("input");
            let mut want = vec![x.shape().first().copied().unwrap_or(0)];
            want.extend_from_slice(shape);
            return Err(Error::shape("forward", &want, x.shape()).at_node(id));
        }
        let mut full = vec![x.rows()];
        full.extend_from_slice(shape);
        x.clone().reshape(full)
    }

    fn eval_node(
        &self,
        i: usize,
        x: &Tensor<T>,
        values: &[Option<Tensor<T>>],
    ) -> Result<(Tensor<T>, Option<Vec<u32>>)> {
        let arg = |k: usize| -> &Tensor<T> {
            values[self.inputs[i][k]]
                .as_ref()
                .expect("inputs are evaluated before their consumers")
        };
        let out = match &self.nodes[i].kind {
            NodeKind::Input { .. } => x.clone(),
            NodeKind::Affine { .. } | NodeKind::LossHead { .. } => {
                affine(arg(0), self.weight(i), self.bias(i))?
            }
            NodeKind::Conv {
                stride, padding, ..
            } => conv2d(arg(0), self.weight(i), self.bias(i), *stride, *padding)?,
            NodeKind::Activation { alpha } => leaky_relu(arg(0), T::from_f64(*alpha as f64)),
            NodeKind::Pool { window, stride } => {
                let (out, argmax) = maxpool2d_with_argmax(arg(0), *window, *stride)?;
                return Ok((out, Some(argmax)));
            }
            NodeKind::Concat => {
                let mut acc = arg(0).clone().flatten_rows();
                for k in 1..self.inputs[i].len() {
                    acc = concat(&acc, &arg(k).clone().flatten_rows(), 1)?;
                }
                acc
            }
        };
        Ok((out, None))
    }

    fn run(&self, x: &Tensor<T>, needed: &[bool], keep: &[bool]) -> Result<Activations<T>> {
        let x = self.check_batch(x)?;
        let n = self.nodes.len();
        let mut last_use = vec![usize::MAX; n];
        for i in (0..n).filter(|&i| needed[i]) {
            for &j in &self.inputs[i] {
                last_use[j] = i;
            }
        }
        let mut values: Vec<Option<Tensor<T>>> = vec![None; n];
        let mut argmax = vec![None; n];
        let mut evaluations = vec![0u32; n];
        for i in 0..n {
            if !needed[i] {
                continue;
            }
            let (out, arg) = self
                .eval_node(i, &x, &values)
                .map_err(|e| e.at_node(&self.nodes[i].id))?;
            values[i] = Some(out);
            argmax[i] = arg;
            evaluations[i] += 1;
            for &j in &self.inputs[i] {
                if last_use[j] == i && !keep[j] {
                    values[j] = None;
                    argmax[j] = None;
                }
            }
        }
        Ok(Activations {
            ids: self.nodes.iter().map(|n| n.id.clone()).collect(),
            values,
            argmax,
            evaluations,
        })
    }

    /// Evaluates every node in topological order.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Activations<T>> {
        let all = vec![true; self.nodes.len()];
        self.run(x, &all, &all)
    }

    /// Evaluates only the ancestors of `targets` and returns their outputs in
    /// the order requested. Intermediate values are released as soon as no
    /// remaining node consumes them.
    pub fn forward_until(&self, x: &Tensor<T>, targets: &[&str]) -> Result<Vec<Tensor<T>>> {
        let n = self.nodes.len();
        let mut keep = vec![false; n];
        let mut idx = Vec::with_capacity(targets.len());
        for t in targets {
            let i = self.node_index(t)?;
            keep[i] = true;
            idx.push(i);
        }
        let mut needed = keep.clone();
        for i in (0..n).rev() {
            if needed[i] {
                for &j in &self.inputs[i] {
                    needed[j] = true;
                }
            }
        }
        let acts = self.run(x, &needed, &keep)?;
        Ok(idx
            .into_iter()
            .map(|i| acts.values[i].clone().expect("kept targets survive the pass"))
            .collect())
    }

    /// Weighted loss of all heads and the gradient of every parameter.
    ///
    /// `labels` is one-hot `[batch, classes]` and is shared by every head.
    pub fn backward(&self, x: &Tensor<T>, labels: &Tensor<T>) -> Result<BackwardOutput<T>> {
        let acts = self.forward(x)?;
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; n];
        let mut total_loss = 0.0;
        let mut head_losses = Vec::new();
        for i in 0..n {
            if let NodeKind::LossHead { weight, .. } = self.nodes[i].kind {
                let logits = acts.values[i].as_ref().expect("forward keeps all nodes");
                let (loss, g) = softmax_cross_entropy(logits, labels)
                    .map_err(|e| e.at_node(&self.nodes[i].id))?;
                total_loss += weight as f64 * loss;
                head_losses.push((self.nodes[i].id.clone(), loss));
                grads[i] = Some(g.map(|v| v * T::from_f64(weight as f64)));
            }
        }

        let mut param_grads = Parameters::default();
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let input_val = |k: usize| -> &Tensor<T> {
                acts.values[self.inputs[i][k]]
                    .as_ref()
                    .expect("forward keeps all nodes")
            };
            let need = |k: usize| self.grad_needed[self.inputs[i][k]];
            let mut input_grads: Vec<Option<Tensor<T>>> = Vec::new();
            let specs = &self.param_specs[i];
            let result: Result<()> = (|| {
                match &self.nodes[i].kind {
                    NodeKind::Input { .. } => {}
                    NodeKind::Affine { .. } | NodeKind::LossHead { .. } => {
                        let r = affine_backward(input_val(0), self.weight(i), &g, need(0))?;
                        param_grads.insert(specs[0].name.clone(), r.weight);
                        param_grads.insert(specs[1].name.clone(), r.bias);
                        input_grads.push(r.input);
                    }
                    NodeKind::Conv {
                        stride, padding, ..
                    } => {
                        let r = conv2d_backward(
                            input_val(0),
                            self.weight(i),
                            *stride,
                            *padding,
                            &g,
                            need(0),
                        )?;
                        param_grads.insert(specs[0].name.clone(), r.kernel);
                        param_grads.insert(specs[1].name.clone(), r.bias);
                        input_grads.push(r.input);
                    }
                    NodeKind::Activation { alpha } => {
                        input_grads.push(Some(leaky_relu_backward(
                            input_val(0),
                            T::from_f64(*alpha as f64),
                            &g,
                        )?));
                    }
                    NodeKind::Pool { .. } => {
                        let argmax = acts.argmax[i].as_ref().expect("pool nodes record argmax");
                        input_grads.push(Some(maxpool2d_backward(
                            input_val(0).shape(),
                            argmax,
                            &g,
                        )?));
                    }
                    NodeKind::Concat => {
                        let mut rest = g.clone();
                        let count = self.inputs[i].len();
                        for k in 0..count {
                            let src = input_val(k);
                            let piece = if k + 1 == count {
                                rest.clone()
                            } else {
                                let (head, tail) = split(&rest, 1, src.row_len())?;
                                rest = tail;
                                head
                            };
                            input_grads.push(Some(piece.reshape(src.shape().to_vec())?));
                        }
                    }
                }
                Ok(())
            })();
            result.map_err(|e| e.at_node(&self.nodes[i].id))?;
            for (k, ig) in input_grads.into_iter().enumerate() {
                let j = self.inputs[i][k];
                let Some(ig) = ig else { continue };
                if !self.grad_needed[j] {
                    continue;
                }
                match grads[j].as_mut() {
                    Some(acc) => acc.add_scaled(&ig, T::ONE)?,
                    None => grads[j] = Some(ig),
                }
            }
        }
        for spec in self.param_specs.iter().flatten() {
            if param_grads.get(&spec.name).is_none() {
                param_grads.insert(spec.name.clone(), Tensor::zeros(spec.shape.clone()));
            }
        }
        Ok(BackwardOutput {
            total_loss,
            head_losses,
            grads: param_grads,
        })
    }
}

impl ModelGraph<f32> {
    /// One optimizer update on a minibatch. Returns the total loss measured
    /// before the update. A non-finite loss or gradient leaves the parameters
    /// untouched and reports `step`.
    pub fn train_step(
        &mut self,
        optimizer: &mut OptimizerState,
        x: &Tensor,
        labels: &Tensor,
        step: usize,
    ) -> Result<f64> {
        let out = self.backward(x, labels)?;
        if !out.total_loss.is_finite() || !out.grads.all_finite() {
            return Err(Error::Diverged {
                step,
                loss: out.total_loss,
            });
        }
        optimizer.step(&mut self.params, &out.grads)?;
        Ok(out.total_loss)
    }
}
