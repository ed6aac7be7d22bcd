use probekit::tensor::gradcheck::{grad_check, run_suite, DiffOp};
use probekit::tensor::{
    concat, conv2d, conv2d_backward, leaky_relu, matmul, maxpool2d, maxpool2d_backward,
    maxpool2d_with_argmax, softmax, softmax_cross_entropy, split, Element, Padding,
};
use probekit::{Result, Rng, Tensor};
use proptest::prelude::*;

mod common;

use common::{assert_close, naive_conv, naive_conv_grads, naive_pool, random};

#[test]
fn conv_matches_naive_loops_on_shape_grid() {
    let mut rng = Rng::new(11);
    let mut checked = 0;
    for h in 1..=8 {
        for w in [1, 3, 5, 8] {
            for cin in [1, 2, 4] {
                for cout in [1, 3] {
                    for kh in 1..=3 {
                        for kw in 1..=3 {
                            for s in 1..=2 {
                                for padding in [Padding::Same, Padding::Valid] {
                                    let x = random(&mut rng, &[2, h, w, cin]);
                                    let k = random(&mut rng, &[kh, kw, cin, cout]);
                                    let b = random(&mut rng, &[cout]);
                                    let got = conv2d(&x, &k, &b, s, padding);
                                    match naive_conv(&x, &k, &b, s, padding) {
                                        Some(want) => {
                                            let got = got.unwrap();
                                            assert_eq!(got.shape(), want.shape());
                                            assert_close(got.data(), want.data(), 1e-5, "conv");
                                            checked += 1;
                                        }
                                        None => assert!(got.is_err(), "kernel {kh}x{kw} on {h}x{w} accepted"),
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    assert!(checked > 1000);
}

#[test]
fn conv_example_six_by_six() {
    let mut rng = Rng::new(3);
    let x = random(&mut rng, &[1, 6, 6, 2]);
    let k = random(&mut rng, &[3, 3, 2, 4]);
    let b = random(&mut rng, &[4]);
    for padding in [Padding::Same, Padding::Valid] {
        let got = conv2d(&x, &k, &b, 1, padding).unwrap();
        let want = naive_conv(&x, &k, &b, 1, padding).unwrap();
        assert_close(got.data(), want.data(), 1e-5, "conv 6x6");
    }
}

#[test]
fn conv_backward_matches_naive_loops() {
    let mut rng = Rng::new(5);
    for (h, w, cin, cout, kh, kw, s) in [(5, 6, 2, 3, 3, 3, 1), (8, 8, 4, 2, 3, 2, 2), (4, 4, 1, 1, 1, 1, 1), (7, 5, 3, 2, 2, 3, 2)] {
        for padding in [Padding::Same, Padding::Valid] {
            let x = random(&mut rng, &[2, h, w, cin]);
            let k = random(&mut rng, &[kh, kw, cin, cout]);
            let b = Tensor::zeros(vec![cout]);
            let out = conv2d(&x, &k, &b, s, padding).unwrap();
            let g = random(&mut rng, out.shape());
            let grads = conv2d_backward(&x, &k, s, padding, &g, true).unwrap();
            let (gx, gk) = naive_conv_grads(&x, &k, &g, s, padding);
            let gx: Vec<f32> = gx.into_iter().map(|v| v as f32).collect();
            let gk: Vec<f32> = gk.into_iter().map(|v| v as f32).collect();
            assert_close(grads.input.unwrap().data(), &gx, 1e-4, "input grad");
            assert_close(grads.kernel.data(), &gk, 1e-4, "kernel grad");
            let gb: Vec<f32> = (0..cout)
                .map(|c| g.data().iter().skip(c).step_by(cout).map(|&v| v as f64).sum::<f64>() as f32)
                .collect();
            assert_close(grads.bias.data(), &gb, 1e-4, "bias grad");
        }
    }
}

#[test]
fn maxpool_matches_naive_loops_on_shape_grid() {
    let mut rng = Rng::new(13);
    for h in 1..=8 {
        for w in 1..=8 {
            for c in [1, 3, 4] {
                for win in 1..=3 {
                    for s in 1..=2 {
                        let x = random(&mut rng, &[2, h, w, c]);
                        let got = maxpool2d(&x, win, s);
                        if win > h || win > w {
                            assert!(got.is_err());
                            continue;
                        }
                        let want = naive_pool(&x, win, s);
                        assert_eq!(got.unwrap().data(), want.data());
                    }
                }
            }
        }
    }
}

#[test]
fn maxpool_example_eight_by_eight() {
    let mut rng = Rng::new(21);
    let x = random(&mut rng, &[1, 8, 8, 3]);
    assert_eq!(maxpool2d(&x, 2, 2).unwrap().data(), naive_pool(&x, 2, 2).data());
}

#[test]
fn maxpool_backward_routes_to_window_argmax() {
    let x = Tensor::new(vec![1, 2, 4, 1], vec![1.0, 5.0, 2.0, 2.0, 3.0, 5.0, 0.0, 1.0]).unwrap();
    let (out, arg) = maxpool2d_with_argmax(&x, 2, 2).unwrap();
    assert_eq!(out.data(), &[5.0, 2.0]);
    let g = Tensor::new(vec![1, 1, 2, 1], vec![1.0, 1.0]).unwrap();
    let gi = maxpool2d_backward(x.shape(), &arg, &g).unwrap();
    assert_eq!(gi.data(), &[0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
}

#[test]
fn matmul_examples() {
    let eye = Tensor::new(vec![3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
    let mut rng = Rng::new(1);
    let b = random(&mut rng, &[3, 4]);
    assert_eq!(matmul(&eye, &b).unwrap(), b);
    let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let c = Tensor::new(vec![2, 1], vec![0.0, 1.0]).unwrap();
    assert_eq!(matmul(&a, &c).unwrap().data(), &[2.0, 4.0]);
    let err = matmul(&a, &b).unwrap_err().to_string();
    assert!(err.contains("[2, 2]") && err.contains("[3, 4]"), "{err}");
}

struct MatMulOp;

impl DiffOp for MatMulOp {
    fn name(&self) -> String {
        "matmul".into()
    }
    fn forward<T: Element>(&self, inputs: &[Tensor<T>]) -> Result<Tensor<T>> {
        matmul(&inputs[0], &inputs[1])
    }
    fn backward<T: Element>(&self, inputs: &[Tensor<T>], g: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        let (ga, gb) = probekit::tensor::matmul_backward(&inputs[0], &inputs[1], g)?;
        Ok(vec![Some(ga), Some(gb)])
    }
}

#[test]
fn matmul_gradient_matches_central_differences() {
    let mut rng = Rng::new(9);
    let a = random(&mut rng, &[4, 5]);
    let b = random(&mut rng, &[5, 3]);
    assert!(grad_check(&MatMulOp, &[a, b], 1e-3).unwrap() < 1e-3);
}

#[test]
fn softmax_cross_entropy_examples() {
    let logits = Tensor::zeros(vec![1, 10]);
    let mut label = Tensor::zeros(vec![1, 10]);
    label.data_mut()[3] = 1.0;
    let (loss, _) = softmax_cross_entropy(&logits, &label).unwrap();
    assert!((loss - 10f64.ln()).abs() < 1e-6);
    let mut hot = Tensor::zeros(vec![1, 10]);
    hot.data_mut()[3] = 30.0;
    let (loss, _) = softmax_cross_entropy(&hot, &label).unwrap();
    assert!(loss < 1e-9, "{loss}");
}

#[test]
fn leaky_relu_examples() {
    let x = Tensor::new(vec![3], vec![-4.0, 0.0, 3.0]).unwrap();
    assert_eq!(leaky_relu(&x, 0.5).data(), &[-2.0, 0.0, 3.0]);
    let y = Tensor::new(vec![2], vec![2.0, -2.0]).unwrap();
    assert_eq!(leaky_relu(&y, 0.5).data(), &[2.0, -1.0]);
    assert_eq!(leaky_relu(&x, 1.0), x);
}

#[test]
fn concat_examples() {
    let a = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
    let b = Tensor::new(vec![1], vec![3.0]).unwrap();
    assert_eq!(concat(&a, &b, 0).unwrap().data(), &[1.0, 2.0, 3.0]);
    let empty = Tensor::new(vec![0], vec![]).unwrap();
    assert_eq!(concat(&a, &empty, 0).unwrap(), a);
}

#[test]
fn full_suite_passes_every_threshold() {
    let reports = run_suite(0, 100).unwrap();
    assert!(reports.len() >= 8);
    for r in &reports {
        assert_eq!(r.points, 100);
        assert!(r.passed(), "{} max rel error {} >= {}", r.op, r.max_rel_error, r.threshold);
    }
    assert_eq!(reports, run_suite(0, 100).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one(seed in any::<u64>(), rows in 1usize..6, cols in 1usize..12, scale in 0.1f64..50.0) {
        let mut rng = Rng::new(seed);
        let x = Tensor::from_fn(vec![rows, cols], |_| (rng.normal() * scale) as f32);
        let p = softmax(&x).unwrap();
        for r in 0..rows {
            let s: f64 = p.row(r).iter().map(|&v| v as f64).sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn split_then_concat_round_trips(seed in any::<u64>(), rows in 1usize..5, cols in 2usize..9, at_frac in 0.0f64..1.0, axis in 0usize..2) {
        let mut rng = Rng::new(seed);
        let x = random(&mut rng, &[rows, cols]);
        let at = (at_frac * x.shape()[axis] as f64) as usize;
        let (a, b) = split(&x, axis, at).unwrap();
        prop_assert_eq!(concat(&a, &b, axis).unwrap(), x);
    }

    #[test]
    fn conv_is_deterministic(seed in any::<u64>(), s in 1usize..3) {
        let mut rng = Rng::new(seed);
        let x = random(&mut rng, &[2, 6, 5, 3]);
        let k = random(&mut rng, &[3, 3, 3, 2]);
        let b = random(&mut rng, &[2]);
        let first = conv2d(&x, &k, &b, s, Padding::Same).unwrap();
        let second = conv2d(&x, &k, &b, s, Padding::Same).unwrap();
        prop_assert_eq!(
            first.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            second.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}
