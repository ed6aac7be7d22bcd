use serde::{Deserialize, Serialize};

use super::{gemm, Element, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Output size `ceil(n / stride)`, zero padding split as evenly as
    /// possible with the extra row/column at the bottom/right.
    Same,
    /// No padding; output size `(n - k) / stride + 1`.
    Valid,
}

/// Output spatial size and leading padding along one axis.
pub fn conv_output_dims(
    input: usize,
    kernel: usize,
    stride: usize,
    padding: Padding,
) -> Option<(usize, usize)> {
    if stride == 0 || kernel == 0 {
        return None;
    }
    match padding {
        Padding::Valid => (kernel <= input).then(|| ((input - kernel) / stride + 1, 0)),
        Padding::Same => {
            let out = input.div_ceil(stride);
            let total = ((out.saturating_sub(1)) * stride + kernel).saturating_sub(input);
            Some((out, total / 2))
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    batch: usize,
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
    stride: usize,
    oh: usize,
    ow: usize,
    pad_top: usize,
    pad_left: usize,
}

impl ConvGeom {
    fn new(input: &[usize], kernel: &[usize], stride: usize, padding: Padding) -> Result<Self> {
        let (&[batch, h, w, cin], &[kh, kw, kc, cout]) = (input, kernel) else {
            return Err(Error::shape("conv2d", input, kernel));
        };
        if kc != cin {
            return Err(Error::shape("conv2d", input, kernel));
        }
        if stride == 0 {
            return Err(Error::input("conv2d", "stride must be at least 1"));
        }
        let (oh, pad_top) =
            conv_output_dims(h, kh, stride, padding).ok_or_else(|| Error::shape("conv2d", input, kernel))?;
        let (ow, pad_left) =
            conv_output_dims(w, kw, stride, padding).ok_or_else(|| Error::shape("conv2d", input, kernel))?;
        Ok(ConvGeom {
            batch,
            h,
            w,
            cin,
            kh,
            kw,
            cout,
            stride,
            oh,
            ow,
            pad_top,
            pad_left,
        })
    }

    fn patch(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }

    /// Images per im2col chunk, bounding the column buffer to ~4M values.
    fn chunk(&self) -> usize {
        let per_image = (self.positions() * self.patch()).max(1);
        ((1 << 22) / per_image).clamp(1, self.batch.max(1))
    }

    /// Input row/column for output position `o` and kernel offset `k`.
    fn source(&self, o: usize, k: usize, pad: usize, limit: usize) -> Option<usize> {
        (o * self.stride + k).checked_sub(pad).filter(|&i| i < limit)
    }

    fn im2col<T: Element>(&self, input: &[T], images: std::ops::Range<usize>, cols: &mut Vec<T>) {
        let patch = self.patch();
        let row_span = self.kw * self.cin;
        cols.clear();
        cols.resize(images.len() * self.positions() * patch, T::ZERO);
        let mut row = 0;
        for img in images {
            let base = img * self.h * self.w * self.cin;
            for oy in 0..self.oh {
                for ox in 0..self.ow {
                    let dst = &mut cols[row * patch..(row + 1) * patch];
                    for ky in 0..self.kh {
                        let Some(iy) = self.source(oy, ky, self.pad_top, self.h) else {
                            continue;
                        };
                        for kx in 0..self.kw {
                            let Some(ix) = self.source(ox, kx, self.pad_left, self.w) else {
                                continue;
                            };
                            let src = base + (iy * self.w + ix) * self.cin;
                            let off = ky * row_span + kx * self.cin;
                            dst[off..off + self.cin].copy_from_slice(&input[src..src + self.cin]);
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    fn col2im<T: Element>(&self, cols: &[T], images: std::ops::Range<usize>, grad_input: &mut [T]) {
        let patch = self.patch();
        let row_span = self.kw * self.cin;
        let mut row = 0;
        for img in images {
            let base = img * self.h * self.w * self.cin;
            for oy in 0..self.oh {
                for ox in 0..self.ow {
                    let src = &cols[row * patch..(row + 1) * patch];
                    for ky in 0..self.kh {
                        let Some(iy) = self.source(oy, ky, self.pad_top, self.h) else {
                            continue;
                        };
                        for kx in 0..self.kw {
                            let Some(ix) = self.source(ox, kx, self.pad_left, self.w) else {
                                continue;
                            };
                            let dst = base + (iy * self.w + ix) * self.cin;
                            let off = ky * row_span + kx * self.cin;
                            for (g, &v) in grad_input[dst..dst + self.cin]
                                .iter_mut()
                                .zip(&src[off..off + self.cin])
                            {
                                *g += v;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// 2-D cross-correlation (no kernel flip) over NHWC input with an
/// `[kh, kw, cin, cout]` kernel, plus a per-channel bias.
pub fn conv2d<T: Element>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: Padding,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(input.shape(), kernel.shape(), stride, padding)?;
    if bias.shape() != [g.cout] {
        return Err(Error::shape("conv2d", kernel.shape(), bias.shape()));
    }
    let rows_per_image = g.positions();
    let mut out = Vec::with_capacity(g.batch * rows_per_image * g.cout);
    for _ in 0..g.batch * rows_per_image {
        out.extend_from_slice(bias.data());
    }
    let mut cols = Vec::new();
    let chunk = g.chunk();
    let mut start = 0;
    while start < g.batch {
        let end = (start + chunk).min(g.batch);
        g.im2col(input.data(), start..end, &mut cols);
        let m = (end - start) * rows_per_image;
        let dst = &mut out[start * rows_per_image * g.cout..end * rows_per_image * g.cout];
        gemm(false, false, m, g.cout, g.patch(), T::ONE, &cols, kernel.data(), T::ONE, dst);
        start = end;
    }
    Tensor::new(vec![g.batch, g.oh, g.ow, g.cout], out)
}

#[derive(Debug, Clone)]
pub struct Conv2dGrads<T: Element> {
    pub input: Option<Tensor<T>>,
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv2d_backward<T: Element>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    padding: Padding,
    grad: &Tensor<T>,
    need_input_grad: bool,
) -> Result<Conv2dGrads<T>> {
    let g = ConvGeom::new(input.shape(), kernel.shape(), stride, padding)?;
    if grad.shape() != [g.batch, g.oh, g.ow, g.cout] {
        return Err(Error::shape("conv2d_backward", &[g.batch, g.oh, g.ow, g.cout], grad.shape()));
    }
    let patch = g.patch();
    let rows_per_image = g.positions();
    let mut gk = vec![T::ZERO; patch * g.cout];
    let mut gb = vec![T::ZERO; g.cout];
    for row in grad.data().chunks_exact(g.cout) {
        for (acc, &v) in gb.iter_mut().zip(row) {
            *acc += v;
        }
    }
    let mut gi = need_input_grad.then(|| vec![T::ZERO; input.len()]);
    let mut cols = Vec::new();
    let mut gcols = Vec::new();
    let chunk = g.chunk();
    let mut start = 0;
    while start < g.batch {
        let end = (start + chunk).min(g.batch);
        let m = (end - start) * rows_per_image;
        let gout = &grad.data()[start * rows_per_image * g.cout..end * rows_per_image * g.cout];
        g.im2col(input.data(), start..end, &mut cols);
        gemm(true, false, patch, g.cout, m, T::ONE, &cols, gout, T::ONE, &mut gk);
        if let Some(gi) = gi.as_mut() {
            gcols.clear();
            gcols.resize(m * patch, T::ZERO);
            gemm(false, true, m, patch, g.cout, T::ONE, gout, kernel.data(), T::ZERO, &mut gcols);
            g.col2im(&gcols, start..end, gi);
        }
        start = end;
    }
    Ok(Conv2dGrads {
        input: gi.map(|d| Tensor::new(input.shape().to_vec(), d)).transpose()?,
        kernel: Tensor::new(kernel.shape().to_vec(), gk)?,
        bias: Tensor::new(vec![g.cout], gb)?,
    })
}

/// Max pooling over NHWC input without padding.
pub fn maxpool2d<T: Element>(input: &Tensor<T>, window: usize, stride: usize) -> Result<Tensor<T>> {
    maxpool2d_with_argmax(input, window, stride).map(|(out, _)| out)
}

/// Max pooling that also returns, per output value, the flat input index of
/// the window maximum (ties go to the lowest index).
pub fn maxpool2d_with_argmax<T: Element>(
    input: &Tensor<T>,
    window: usize,
    stride: usize,
) -> Result<(Tensor<T>, Vec<u32>)> {
    let &[batch, h, w, c] = input.shape() else {
        return Err(Error::input("maxpool2d", format!("expected NHWC input, got {:?}", input.shape())));
    };
    if window == 0 || stride == 0 {
        return Err(Error::input("maxpool2d", "window and stride must be at least 1"));
    }
    if window > h || window > w {
        return Err(Error::shape("maxpool2d", input.shape(), &[window, window]));
    }
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    let x = input.data();
    let mut out = Vec::with_capacity(batch * oh * ow * c);
    let mut arg = Vec::with_capacity(batch * oh * ow * c);
    for n in 0..batch {
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut best_idx = ((n * h + oy * stride) * w + ox * stride) * c + ch;
                    let mut best = x[best_idx];
                    // Row-major scan with strict `>` keeps the lowest flat index on ties.
                    for ky in 0..window {
                        for kx in 0..window {
                            let idx = ((n * h + oy * stride + ky) * w + ox * stride + kx) * c + ch;
                            if x[idx] > best {
                                best = x[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out.push(best);
                    arg.push(best_idx as u32);
                }
            }
        }
    }
    Ok((Tensor::new(vec![batch, oh, ow, c], out)?, arg))
}

/// Routes each output gradient to its window's argmax.
pub fn maxpool2d_backward<T: Element>(
    input_shape: &[usize],
    argmax: &[u32],
    grad: &Tensor<T>,
) -> Result<Tensor<T>> {
    if argmax.len() != grad.len() {
        return Err(Error::shape("maxpool2d_backward", &[argmax.len()], grad.shape()));
    }
    let mut gi = Tensor::zeros(input_shape.to_vec());
    let data = gi.data_mut();
    for (&idx, &g) in argmax.iter().zip(grad.data()) {
        data[idx as usize] += g;
    }
    Ok(gi)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_by_one_identity_kernel() {
        let x = Tensor::<f32>::from_fn(vec![2, 3, 3, 1], |i| i as f32 - 4.0);
        let k = Tensor::full(vec![1, 1, 1, 1], 1.0);
        let out = conv2d(&x, &k, &Tensor::zeros(vec![1]), 1, Padding::Valid).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn ones_kernel_on_constant_field() {
        let x = Tensor::<f32>::full(vec![1, 5, 5, 1], 2.0);
        let k = Tensor::full(vec![3, 3, 1, 1], 1.0);
        let out = conv2d(&x, &k, &Tensor::zeros(vec![1]), 1, Padding::Valid).unwrap();
        assert_eq!(out.shape(), &[1, 3, 3, 1]);
        assert!(out.data().iter().all(|&v| v == 18.0));
    }

    #[test]
    fn same_padding_dims() {
        assert_eq!(conv_output_dims(28, 5, 1, Padding::Same), Some((28, 2)));
        assert_eq!(conv_output_dims(7, 3, 2, Padding::Same), Some((4, 1)));
        assert_eq!(conv_output_dims(6, 2, 2, Padding::Same), Some((3, 0)));
        assert_eq!(conv_output_dims(4, 5, 1, Padding::Valid), None);
    }

    #[test]
    fn kernel_larger_than_input_is_rejected() {
        let x = Tensor::<f32>::zeros(vec![1, 2, 2, 1]);
        let k = Tensor::zeros(vec![3, 3, 1, 1]);
        assert!(matches!(
            conv2d(&x, &k, &Tensor::zeros(vec![1]), 1, Padding::Valid),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn maxpool_examples() {
        let x = Tensor::<f32>::new(vec![1, 2, 2, 1], vec![1., 2., 3., 4.]).unwrap();
        assert_eq!(maxpool2d(&x, 2, 2).unwrap().data(), &[4.]);
        let c = Tensor::<f32>::full(vec![1, 4, 4, 2], 0.5);
        let out = maxpool2d(&c, 2, 2).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.5));
        assert!(maxpool2d(&x, 3, 1).is_err());
    }

    #[test]
    fn maxpool_ties_route_to_lowest_index() {
        let x = Tensor::<f32>::full(vec![1, 2, 2, 1], 1.0);
        let (_, arg) = maxpool2d_with_argmax(&x, 2, 2).unwrap();
        assert_eq!(arg, vec![0]);
        let g = maxpool2d_backward(x.shape(), &arg, &Tensor::full(vec![1, 1, 1, 1], 1.0)).unwrap();
        assert_eq!(g.data(), &[1., 0., 0., 0.]);
    }
}
