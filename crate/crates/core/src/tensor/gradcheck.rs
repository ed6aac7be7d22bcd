//! Central finite-difference checks for the differentiable primitives.
//!
//! Numeric and analytic gradients are both evaluated in `f64` through the same
//! generic kernels the `f32` training path uses. The checked scalar is a
//! fixed-weight sum of the op output.

use super::{
    affine, affine_backward, concat, conv2d, conv2d_backward, leaky_relu, leaky_relu_backward,
    matmul, matmul_backward, maxpool2d_backward, maxpool2d_with_argmax, softmax_cross_entropy,
    split, Element, Padding, Tensor,
};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// An operation with an analytic backward pass.
pub trait DiffOp {
    fn name(&self) -> String;

    fn forward<T: Element>(&self, inputs: &[Tensor<T>]) -> Result<Tensor<T>>;

    /// Gradient for each input; `None` marks inputs that are not
    /// differentiated (labels, for instance).
    fn backward<T: Element>(
        &self,
        inputs: &[Tensor<T>],
        grad_out: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>>;
}

const REDUCTION_SEED: u64 = 0x6772_6164_6368_6b00;

fn reduction_weights(len: usize) -> Vec<f64> {
    let mut rng = Rng::new(REDUCTION_SEED);
    (0..len).map(|_| 0.5 + rng.uniform()).collect()
}

fn reduce<O: DiffOp>(op: &O, inputs: &[Tensor<f64>], weights: &[f64]) -> Result<f64> {
    let out = op.forward(inputs)?;
    if !out.all_finite() {
        return Err(Error::NonFinite(format!("{} output", op.name())));
    }
    Ok(out.data().iter().zip(weights).map(|(o, w)| o * w).sum())
}

/// Largest relative error `|a - n| / max(|a|, |n|, 1e-8)` between the analytic
/// gradient and central differences with step `eps`, over every element of
/// every differentiable input.
pub fn grad_check<O: DiffOp>(op: &O, point: &[Tensor], eps: f64) -> Result<f64> {
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::input("grad_check", "eps must be positive"));
    }
    let mut inputs: Vec<Tensor<f64>> = point.iter().map(Tensor::cast).collect();
    let out = op.forward(&inputs)?;
    let weights = reduction_weights(out.len());
    let grad_out = Tensor::new(out.shape().to_vec(), weights.clone())?;
    let analytic = op.backward(&inputs, &grad_out)?;
    let mut worst: f64 = 0.0;
    for (i, grad) in analytic.iter().enumerate() {
        let Some(grad) = grad else { continue };
        if grad.shape() != inputs[i].shape() {
            return Err(Error::shape("grad_check", inputs[i].shape(), grad.shape()));
        }
        if !grad.all_finite() {
            return Err(Error::NonFinite(format!("{} gradient", op.name())));
        }
        for j in 0..inputs[i].len() {
            let x = inputs[i].data()[j];
            inputs[i].data_mut()[j] = x + eps;
            let plus = reduce(op, &inputs, &weights)?;
            inputs[i].data_mut()[j] = x - eps;
            let minus = reduce(op, &inputs, &weights)?;
            inputs[i].data_mut()[j] = x;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad.data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

pub struct Scale(pub f64);

impl DiffOp for Scale {
    fn name(&self) -> String {
        format!("scale({})", self.0)
    }
    fn forward<T: Element>(&self, inputs: &[Tensor<T>]) -> Result<Tensor<T>> {
        let s = T::from_f64(self.0);
        Ok(inputs[0].map(|v| v * s))
    }
    fn backward<T: Element>(&self, _: &[Tensor<T>], g: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        let s = T::from_f64(self.0);
        Ok(vec![Some(g.map(|v| v * s))])
    }
}

pub struct MatMul;

impl DiffOp for MatMul {
    fn name(&self) -> String {
        "matmul".into()
    }
    fn forward<T: Element>(&self, inputs: &[Tensor<T>]) -> Result<Tensor<T>> {
        matmul(&inputs[0], &inputs[1])
    }
    fn backward<T: Element>(&self, inputs: &[Tensor<T>], g: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        let (ga, gb) = matmul_backward(&inputs[0], &inputs[1], g)?;
        Ok(vec![Some(ga), Some(gb)])
    }
}

/// Inputs: `x`, `weight`, `bias`.
pub struct Affine;

impl DiffOp for Affine {
    fn name(&self) -> String {
        "affine".into()
    }
    fn forward<T: Element>(&self, inputs: &[Tensor<T>]) -> Result<Tensor<T>> {
        affine(&inputs[0], &inputs[1], &inputs[2])
    }
    fn backward<T: Element>(&self, inputs: &[Tensor<T>], g: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        let grads = affine_backward(&inputs[0], &inputs[1], g, true)?;
        Ok(vec![grads.input, Some(grads.weight), Some(grads.bias)])
    }
}

pub struct LeakyRelu(pub f64);

impl DiffOp for LeakyRelu {
    fn name(&self) -> String {
        format!("leaky_relu({})", self.0)
    }
    fn forward<T: Element>(&self, inputs: &[Tensor<T>]) -> Result<Tensor<T>> {
        Ok(leaky_relu(&inputs[0], T::from_f64(self.0)))
    }
    fn backward<T: Element>(&self, inputs: &[Tensor<T>], g: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![Some(leaky_relu_backward(&inputs[0], T::from_f64(self.0), g)?)])
    }
}

/// Inputs: `input`, `kernel`, `bias`.
pub struct Conv2d {
    pub stride: usize,
    pub padding: Padding,
}

impl DiffOp for Conv2d {
    fn name(&self) -> String {
        format!("conv2d(stride {}, {:?})", self.stride, self.padding)
    }
    fn forward<T: Element>(&self, inputs: &[Tensor<T>]) -> Result<Tensor<T>> {
        conv2d(&inputs[0], &inputs[1], &inputs[2], self.stride, self.padding)
    }
    fn backward<T: Element>(&self, inputs: &[Tensor<T>], g: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        let grads = conv2d_backward(&inputs[0], &inputs[1], self.stride, self.padding, g, true)?;
        Ok(vec![grads.input, Some(grads.kernel), Some(grads.bias)])
    }
}

pub struct MaxPool2d {
    pub window: usize,
    pub stride: usize,
}

impl DiffOp for MaxPool2d {
    fn name(&self) -> String {
        format!("maxpool2d({}/{})", self.window, self.stride)
    }
    fn forward<T: Element>(&self, inputs: &[Tensor<T>]) -> Result<Tensor<T>> {
        Ok(maxpool2d_with_argmax(&inputs[0], self.window, self.stride)?.0)
    }
    fn backward<T: Element>(&self, inputs: &[Tensor<T>], g: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        let (_, arg) = maxpool2d_with_argmax(&inputs[0], self.window, self.stride)?;
        Ok(vec![Some(maxpool2d_backward(inputs[0].shape(), &arg, g)?)])
    }
}

/// Inputs: `logits`, one-hot `labels`; output is the scalar loss.
pub struct SoftmaxCrossEntropy;

impl DiffOp for SoftmaxCrossEntropy {
    fn name(&self) -> String {
        "softmax_cross_entropy".into()
    }
    fn forward<T: Element>(&self, inputs: &[Tensor<T>]) -> Result<Tensor<T>> {
        let (loss, _) = softmax_cross_entropy(&inputs[0], &inputs[1])?;
        Ok(Tensor::scalar(T::from_f64(loss)))
    }
    fn backward<T: Element>(&self, inputs: &[Tensor<T>], g: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        let (_, grad) = softmax_cross_entropy(&inputs[0], &inputs[1])?;
        let scale = g.data()[0];
        Ok(vec![Some(grad.map(|v| v * scale)), None])
    }
}

pub struct Concat {
    pub axis: usize,
}

impl DiffOp for Concat {
    fn name(&self) -> String {
        format!("concat(axis {})", self.axis)
    }
    fn forward<T: Element>(&self, inputs: &[Tensor<T>]) -> Result<Tensor<T>> {
        concat(&inputs[0], &inputs[1], self.axis)
    }
    fn backward<T: Element>(&self, inputs: &[Tensor<T>], g: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        let (a, b) = split(g, self.axis, inputs[0].shape()[self.axis])?;
        Ok(vec![Some(a), Some(b)])
    }
}

/// Outcome of checking one op over many random points.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub op: String,
    pub points: usize,
    pub max_rel_error: f64,
    pub threshold: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.threshold
    }
}

pub const GRADCHECK_EPS: f64 = 1e-3;

fn normal_tensor(rng: &mut Rng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| (rng.normal() * scale) as f32)
}

fn one_hot_rows(rng: &mut Rng, rows: usize, classes: usize) -> Tensor {
    let mut t = Tensor::zeros(vec![rows, classes]);
    for r in 0..rows {
        let c = rng.below(classes);
        t.data_mut()[r * classes + c] = 1.0;
    }
    t
}

/// Values with magnitude in `[min_abs, min_abs + 2)` and random sign.
fn away_from_zero(rng: &mut Rng, shape: &[usize], min_abs: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| {
        let mag = min_abs + 2.0 * rng.uniform();
        (if rng.uniform() < 0.5 { -mag } else { mag }) as f32
    })
}

/// Distinct values at least `gap` apart, randomly placed.
fn distinct_values(rng: &mut Rng, shape: &[usize], gap: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let order = rng.permutation(n);
    Tensor::from_fn(shape.to_vec(), |i| ((order[i] as f64 - n as f64 / 2.0) * gap) as f32)
}

fn check_many<O: DiffOp>(
    op: &O,
    threshold: f64,
    points: usize,
    rng: &mut Rng,
    mut make: impl FnMut(&mut Rng) -> Vec<Tensor>,
) -> Result<GradCheckReport> {
    let mut worst: f64 = 0.0;
    for _ in 0..points {
        let point = make(rng);
        worst = worst.max(grad_check(op, &point, GRADCHECK_EPS)?);
    }
    Ok(GradCheckReport {
        op: op.name(),
        points,
        max_rel_error: worst,
        threshold,
    })
}

/// Checks every differentiable primitive at `points` random points each.
pub fn run_suite(seed: u64, points: usize) -> Result<Vec<GradCheckReport>> {
    let mut rng = Rng::new(seed);
    let eps = GRADCHECK_EPS;
    let mut reports = vec![
        check_many(&Scale(3.0), 1e-7, points, &mut rng, |r| vec![normal_tensor(r, &[5], 1.0)])?,
        check_many(&MatMul, 1e-3, points, &mut rng, |r| {
            vec![normal_tensor(r, &[4, 5], 1.0), normal_tensor(r, &[5, 3], 1.0)]
        })?,
        check_many(&Affine, 1e-3, points, &mut rng, |r| {
            vec![
                normal_tensor(r, &[3, 2, 3], 1.0),
                normal_tensor(r, &[6, 4], 1.0),
                normal_tensor(r, &[4], 1.0),
            ]
        })?,
        check_many(&LeakyRelu(0.5), 1e-4, points, &mut rng, |r| {
            vec![away_from_zero(r, &[4, 6], 10.0 * eps + 1e-3)]
        })?,
        check_many(&SoftmaxCrossEntropy, 1e-3, points, &mut rng, |r| {
            vec![normal_tensor(r, &[4, 5], 2.0), one_hot_rows(r, 4, 5)]
        })?,
        check_many(&Concat { axis: 1 }, 1e-3, points, &mut rng, |r| {
            vec![normal_tensor(r, &[3, 2], 1.0), normal_tensor(r, &[3, 4], 1.0)]
        })?,
    ];
    for (stride, padding) in [(1, Padding::Valid), (1, Padding::Same), (2, Padding::Same)] {
        let op = Conv2d { stride, padding };
        reports.push(check_many(&op, 1e-3, points, &mut rng, |r| {
            vec![
                normal_tensor(r, &[2, 5, 5, 2], 1.0),
                normal_tensor(r, &[3, 3, 2, 3], 0.5),
                normal_tensor(r, &[3], 0.5),
            ]
        })?);
    }
    for (window, stride) in [(2, 2), (3, 1)] {
        let op = MaxPool2d { window, stride };
        reports.push(check_many(&op, 1e-3, points, &mut rng, |r| {
            vec![distinct_values(r, &[2, 6, 6, 2], 20.0 * eps)]
        })?);
    }
    Ok(reports)
}
