use super::{gemm, Element, Tensor};
use crate::error::{Error, Result};

fn expect_matrix<T: Element>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize)> {
    match t.shape() {
        &[r, c] => Ok((r, c)),
        other => Err(Error::input(op, format!("expected a matrix, got shape {other:?}"))),
    }
}

/// `a [m x k] * b [k x n]`.
pub fn matmul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = expect_matrix("matmul", a)?;
    let (k2, n) = expect_matrix("matmul", b)?;
    if k != k2 {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let mut out = vec![T::ZERO; m * n];
    gemm(false, false, m, n, k, T::ONE, a.data(), b.data(), T::ZERO, &mut out);
    Tensor::new(vec![m, n], out)
}

/// Gradients of `matmul` for both operands: `(g * b^T, a^T * g)`.
pub fn matmul_backward<T: Element>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    grad: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (m, k) = expect_matrix("matmul_backward", a)?;
    let (k2, n) = expect_matrix("matmul_backward", b)?;
    if k != k2 || grad.shape() != [m, n] {
        return Err(Error::shape("matmul_backward", &[m, k2], grad.shape()));
    }
    let mut ga = vec![T::ZERO; m * k];
    gemm(false, true, m, k, n, T::ONE, grad.data(), b.data(), T::ZERO, &mut ga);
    let mut gb = vec![T::ZERO; k * n];
    gemm(true, false, k, n, m, T::ONE, a.data(), grad.data(), T::ZERO, &mut gb);
    Ok((Tensor::new(vec![m, k], ga)?, Tensor::new(vec![k, n], gb)?))
}

/// `x W + b` where `x` is flattened to `[batch, fan_in]`, `W` is
/// `[fan_in, units]` and `b` is `[units]`.
pub fn affine<T: Element>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (fan_in, units) = expect_matrix("affine", weight)?;
    let batch = x.rows();
    if x.row_len() != fan_in || bias.shape() != [units] {
        return Err(Error::shape("affine", x.shape(), weight.shape()));
    }
    let mut out = Vec::with_capacity(batch * units);
    for _ in 0..batch {
        out.extend_from_slice(bias.data());
    }
    gemm(false, false, batch, units, fan_in, T::ONE, x.data(), weight.data(), T::ONE, &mut out);
    Tensor::new(vec![batch, units], out)
}

#[derive(Debug, Clone)]
pub struct AffineGrads<T: Element> {
    /// Same shape as the (unflattened) input; `None` when not requested.
    pub input: Option<Tensor<T>>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn affine_backward<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad: &Tensor<T>,
    need_input_grad: bool,
) -> Result<AffineGrads<T>> {
    let (fan_in, units) = expect_matrix("affine_backward", weight)?;
    let batch = x.rows();
    if x.row_len() != fan_in || grad.shape() != [batch, units] {
        return Err(Error::shape("affine_backward", x.shape(), grad.shape()));
    }
    let mut gw = vec![T::ZERO; fan_in * units];
    gemm(true, false, fan_in, units, batch, T::ONE, x.data(), grad.data(), T::ZERO, &mut gw);
    let mut gb = vec![T::ZERO; units];
    for row in grad.data().chunks_exact(units) {
        for (acc, &g) in gb.iter_mut().zip(row) {
            *acc += g;
        }
    }
    let input = if need_input_grad {
        let mut gx = vec![T::ZERO; batch * fan_in];
        gemm(false, true, batch, fan_in, units, T::ONE, grad.data(), weight.data(), T::ZERO, &mut gx);
        Some(Tensor::new(x.shape().to_vec(), gx)?)
    } else {
        None
    };
    Ok(AffineGrads {
        input,
        weight: Tensor::new(vec![fan_in, units], gw)?,
        bias: Tensor::new(vec![units], gb)?,
    })
}

/// Elementwise `x` for `x > 0`, `alpha * x` otherwise.
///
/// # Panics
/// If `alpha` is outside `[0, 1]`.
pub fn leaky_relu<T: Element>(x: &Tensor<T>, alpha: T) -> Tensor<T> {
    assert!(
        alpha >= T::ZERO && alpha <= T::ONE,
        "leaky_relu: alpha {alpha:?} outside [0, 1]"
    );
    x.map(|v| if v > T::ZERO { v } else { alpha * v })
}

/// The derivative at `x == 0` is taken to be `alpha`.
pub fn leaky_relu_backward<T: Element>(x: &Tensor<T>, alpha: T, grad: &Tensor<T>) -> Result<Tensor<T>> {
    if x.shape() != grad.shape() {
        return Err(Error::shape("leaky_relu_backward", x.shape(), grad.shape()));
    }
    let data = x
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&v, &g)| if v > T::ZERO { g } else { alpha * g })
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Row-wise softmax of a `[batch, d]` matrix, max-subtracted.
pub fn softmax<T: Element>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, d) = expect_matrix("softmax", logits)?;
    if d == 0 {
        return Err(Error::input("softmax", "zero classes"));
    }
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.data().chunks_exact(d) {
        let max = row_max(row);
        let exps: Vec<f64> = row.iter().map(|&v| (v.to_f64() - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| T::from_f64(e / sum)));
    }
    Tensor::new(logits.shape().to_vec(), out)
}

fn row_max<T: Element>(row: &[T]) -> f64 {
    row.iter().map(|v| v.to_f64()).fold(f64::NEG_INFINITY, f64::max)
}

/// Index of the single `1` in a one-hot row.
pub(crate) fn one_hot_index<T: Element>(row: &[T]) -> Option<usize> {
    let mut hot = None;
    for (j, &v) in row.iter().enumerate() {
        if v == T::ONE {
            if hot.is_some() {
                return None;
            }
            hot = Some(j);
        } else if v != T::ZERO {
            return None;
        }
    }
    hot
}

/// Mean softmax cross-entropy over the batch and its gradient
/// `(softmax(logits) - labels) / batch`. Accumulation is done in `f64`.
pub fn softmax_cross_entropy<T: Element>(
    logits: &Tensor<T>,
    labels: &Tensor<T>,
) -> Result<(f64, Tensor<T>)> {
    let (batch, d) = expect_matrix("softmax_cross_entropy", logits)?;
    if labels.shape() != logits.shape() {
        return Err(Error::shape("softmax_cross_entropy", logits.shape(), labels.shape()));
    }
    if d == 0 {
        return Err(Error::input("softmax_cross_entropy", "zero classes"));
    }
    if batch == 0 {
        return Err(Error::input("softmax_cross_entropy", "empty batch"));
    }
    let inv_batch = 1.0 / batch as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (i, (row, label_row)) in logits
        .data()
        .chunks_exact(d)
        .zip(labels.data().chunks_exact(d))
        .enumerate()
    {
        let target = one_hot_index(label_row).ok_or_else(|| {
            Error::input("softmax_cross_entropy", format!("label row {i} is not one-hot"))
        })?;
        let max = row_max(row);
        let exps: Vec<f64> = row.iter().map(|&v| (v.to_f64() - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        loss += max + sum.ln() - row[target].to_f64();
        for (j, e) in exps.iter().enumerate() {
            let y = if j == target { 1.0 } else { 0.0 };
            grad.push(T::from_f64((e / sum - y) * inv_batch));
        }
    }
    Ok((loss * inv_batch, Tensor::new(vec![batch, d], grad)?))
}

fn concat_dims(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Concatenates along `axis`; all other axes must agree.
pub fn concat<T: Element>(a: &Tensor<T>, b: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if a.rank() != b.rank() || axis >= a.rank() {
        return Err(Error::shape("concat", a.shape(), b.shape()));
    }
    let same_elsewhere = a
        .shape()
        .iter()
        .zip(b.shape())
        .enumerate()
        .all(|(i, (x, y))| i == axis || x == y);
    if !same_elsewhere {
        return Err(Error::shape("concat", a.shape(), b.shape()));
    }
    let (outer, na, inner) = concat_dims(a.shape(), axis);
    let nb = b.shape()[axis];
    let mut data = Vec::with_capacity(a.len() + b.len());
    for o in 0..outer {
        data.extend_from_slice(&a.data()[o * na * inner..(o + 1) * na * inner]);
        data.extend_from_slice(&b.data()[o * nb * inner..(o + 1) * nb * inner]);
    }
    let mut shape = a.shape().to_vec();
    shape[axis] = na + nb;
    Tensor::new(shape, data)
}

/// Splits along `axis` at position `at`; the inverse of [`concat`] and its
/// backward pass.
pub fn split<T: Element>(x: &Tensor<T>, axis: usize, at: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    if axis >= x.rank() || at > x.shape()[axis] {
        return Err(Error::input(
            "split",
            format!("cannot split shape {:?} at {at} on axis {axis}", x.shape()),
        ));
    }
    let (outer, n, inner) = concat_dims(x.shape(), axis);
    let mut first = Vec::with_capacity(outer * at * inner);
    let mut second = Vec::with_capacity(outer * (n - at) * inner);
    for o in 0..outer {
        let block = &x.data()[o * n * inner..(o + 1) * n * inner];
        first.extend_from_slice(&block[..at * inner]);
        second.extend_from_slice(&block[at * inner..]);
    }
    let mut s1 = x.shape().to_vec();
    s1[axis] = at;
    let mut s2 = x.shape().to_vec();
    s2[axis] = n - at;
    Ok((Tensor::new(s1, first)?, Tensor::new(s2, second)?))
}
