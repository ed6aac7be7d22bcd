#![allow(dead_code)]

use probekit::tensor::Padding;
use probekit::{Rng, Tensor};

pub fn random(rng: &mut Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.normal() as f32)
}

pub fn pad_before(n: usize, k: usize, s: usize, padding: Padding) -> Option<(usize, usize)> {
    match padding {
        Padding::Valid => (k <= n).then(|| ((n - k) / s + 1, 0)),
        Padding::Same => {
            let out = n.div_ceil(s);
            let total = ((out - 1) * s + k).saturating_sub(n);
            Some((out, total / 2))
        }
    }
}

/// Direct quadruple loop over output pixels and kernel taps.
pub fn naive_conv(x: &Tensor, k: &Tensor, b: &Tensor, s: usize, padding: Padding) -> Option<Tensor> {
    let &[n, h, w, cin] = x.shape() else { panic!() };
    let &[kh, kw, _, cout] = k.shape() else { panic!() };
    let (oh, pt) = pad_before(h, kh, s, padding)?;
    let (ow, pl) = pad_before(w, kw, s, padding)?;
    let mut out = vec![0.0f64; n * oh * ow * cout];
    for bi in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for co in 0..cout {
                    let mut acc = b.data()[co] as f64;
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * s + ky) as isize - pt as isize;
                            let ix = (ox * s + kx) as isize - pl as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            for ci in 0..cin {
                                let xv = x.data()[((bi * h + iy as usize) * w + ix as usize) * cin + ci];
                                let kv = k.data()[((ky * kw + kx) * cin + ci) * cout + co];
                                acc += xv as f64 * kv as f64;
                            }
                        }
                    }
                    out[((bi * oh + oy) * ow + ox) * cout + co] = acc;
                }
            }
        }
    }
    Some(Tensor::new(vec![n, oh, ow, cout], out.into_iter().map(|v| v as f32).collect()).unwrap())
}

/// Kernel and input gradients of `sum(g * conv(x, k))`, accumulated tap by tap.
pub fn naive_conv_grads(x: &Tensor, k: &Tensor, g: &Tensor, s: usize, padding: Padding) -> (Vec<f64>, Vec<f64>) {
    let &[n, h, w, cin] = x.shape() else { panic!() };
    let &[kh, kw, _, cout] = k.shape() else { panic!() };
    let (oh, pt) = pad_before(h, kh, s, padding).unwrap();
    let (ow, pl) = pad_before(w, kw, s, padding).unwrap();
    let mut gx = vec![0.0; x.len()];
    let mut gk = vec![0.0; k.len()];
    for bi in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for co in 0..cout {
                    let go = g.data()[((bi * oh + oy) * ow + ox) * cout + co] as f64;
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * s + ky) as isize - pt as isize;
                            let ix = (ox * s + kx) as isize - pl as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            for ci in 0..cin {
                                let xi = ((bi * h + iy as usize) * w + ix as usize) * cin + ci;
                                let ki = ((ky * kw + kx) * cin + ci) * cout + co;
                                gx[xi] += go * k.data()[ki] as f64;
                                gk[ki] += go * x.data()[xi] as f64;
                            }
                        }
                    }
                }
            }
        }
    }
    (gx, gk)
}

pub fn naive_pool(x: &Tensor, win: usize, s: usize) -> Tensor {
    let &[n, h, w, c] = x.shape() else { panic!() };
    let oh = (h - win) / s + 1;
    let ow = (w - win) / s + 1;
    let mut out = Vec::new();
    for bi in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut m = f32::NEG_INFINITY;
                    for ky in 0..win {
                        for kx in 0..win {
                            m = m.max(x.data()[((bi * h + oy * s + ky) * w + ox * s + kx) * c + ch]);
                        }
                    }
                    out.push(m);
                }
            }
        }
    }
    Tensor::new(vec![n, oh, ow, c], out).unwrap()
}

pub fn assert_close(a: &[f32], b: &[f32], tol: f32, what: &str) {
    assert_eq!(a.len(), b.len(), "{what}: lengths");
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "{what}[{i}]: {x} vs {y}");
    }
}

