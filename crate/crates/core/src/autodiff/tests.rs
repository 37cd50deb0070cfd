use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

/// Straight index-arithmetic depthwise correlation, independent of the kernels module.
fn depthwise_loop(x: &Tensor<f64>, k: &Tensor<f64>, stride: usize) -> Tensor<f64> {
    let (n, h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let ks = k.shape()[0] as isize;
    let pad = (ks - 1) / 2;
    let oh = (h + stride - 1) / stride;
    let ow = (w + stride - 1) / stride;
    let mut out = vec![0.0; n * oh * ow * c];
    for b in 0..n {
        for y in 0..oh {
            for xo in 0..ow {
                for ch in 0..c {
                    let mut acc = 0.0;
                    for i in 0..ks {
                        for j in 0..ks {
                            let iy = (y * stride) as isize + i - pad;
                            let ix = (xo * stride) as isize + j - pad;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            let xv = x.data()[((b * h + iy as usize) * w + ix as usize) * c + ch];
                            let kv = k.data()[((i * ks + j) as usize) * c + ch];
                            acc += xv * kv;
                        }
                    }
                    out[((b * oh + y) * ow + xo) * c + ch] = acc;
                }
            }
        }
    }
    t(&[n, oh, ow, c], &out)
}

#[test]
fn pointwise_selects_channel() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::ones(&[1, 2, 2, 2]));
    let w = g.constant(t(&[2, 1], &[1.0, 0.0]));
    let y = g.pointwise_conv(x, w).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 2, 2, 1]);
    assert!(g.value(y).data().iter().all(|&v| v == 1.0));
}

#[test]
fn pointwise_zero_weight_gives_zero() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::randn(&[1, 2, 2, 3], 1.0, &mut rng(1)));
    let w = g.constant(Tensor::zeros(&[3, 4]));
    let y = g.pointwise_conv(x, w).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn pointwise_matches_triple_loop() {
    let mut r = rng(7);
    let xv = Tensor::<f64>::randn(&[1, 3, 3, 4], 1.0, &mut r);
    let wv = Tensor::<f64>::randn(&[4, 2], 1.0, &mut r);
    let mut g = Graph::<f64>::new();
    let (x, w) = (g.constant(xv.clone()), g.constant(wv.clone()));
    let y = g.pointwise_conv(x, w).unwrap();
    for p in 0..9 {
        for co in 0..2 {
            let mut acc = 0.0;
            for ci in 0..4 {
                acc += xv.data()[p * 4 + ci] * wv.data()[ci * 2 + co];
            }
            assert!((g.value(y).data()[p * 2 + co] - acc).abs() < 1e-12);
        }
    }
}

#[test]
fn pointwise_rejects_channel_mismatch() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::<f64>::ones(&[1, 2, 2, 3]));
    let w = g.constant(Tensor::zeros(&[2, 4]));
    let err = g.pointwise_conv(x, w).unwrap_err();
    assert!(err.to_string().contains("3 channels"), "{err}");
}

#[test]
fn depthwise_center_one_hot_is_identity() {
    let xv = Tensor::<f64>::randn(&[2, 4, 5, 3], 1.0, &mut rng(2));
    for ks in [3, 5] {
        let mut kv = Tensor::zeros(&[ks, ks, 3]);
        let centre = (ks / 2) * ks + ks / 2;
        for c in 0..3 {
            kv.data_mut()[centre * 3 + c] = 1.0;
        }
        let mut g = Graph::<f64>::new();
        let (x, k) = (g.constant(xv.clone()), g.constant(kv));
        let y = g.depthwise_conv(x, k, 1).unwrap();
        assert_eq!(g.value(y), &xv);
    }
}

#[test]
fn depthwise_zero_kernel_gives_zero() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::randn(&[1, 4, 4, 2], 1.0, &mut rng(3)));
    let k = g.constant(Tensor::zeros(&[5, 5, 2]));
    let y = g.depthwise_conv(x, k, 1).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn depthwise_matches_loop_oracle() {
    let mut r = rng(11);
    for (ks, stride, h, w) in [(3, 1, 5, 5), (5, 1, 5, 5), (3, 2, 5, 6), (5, 2, 8, 7)] {
        let xv = Tensor::<f64>::randn(&[1, h, w, 3], 1.0, &mut r);
        let kv = Tensor::<f64>::randn(&[ks, ks, 3], 1.0, &mut r);
        let mut g = Graph::<f64>::new();
        let (x, k) = (g.constant(xv.clone()), g.constant(kv.clone()));
        let y = g.depthwise_conv(x, k, stride).unwrap();
        let expect = depthwise_loop(&xv, &kv, stride);
        assert_eq!(g.value(y).shape(), expect.shape());
        assert!(g.value(y).max_abs_diff(&expect) < 1e-12);
    }
}

#[test]
fn depthwise_rejects_unsupported_extent() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::<f64>::ones(&[1, 4, 4, 2]));
    let k = g.constant(Tensor::ones(&[7, 7, 2]));
    assert!(matches!(g.depthwise_conv(x, k, 1), Err(Error::UnsupportedKernel(7))));
}

#[test]
fn elementwise_glue_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(t(&[2], &[-1.0, 2.0]));
    let r = g.relu(x);
    assert_eq!(g.value(r).data(), &[0.0, 2.0]);

    let c = g.constant(Tensor::full(&[2, 3, 3, 4], 1.5));
    let p = g.global_mean_pool(c).unwrap();
    assert_eq!(g.value(p).shape(), &[2, 4]);
    assert!(g.value(p).data().iter().all(|&v| (v - 1.5).abs() < 1e-15));

    let xv = Tensor::randn(&[3, 4], 1.0, &mut rng(5));
    let x = g.constant(xv.clone());
    let eye = g.constant(Tensor::from_fn(&[4, 4], |i| if i / 4 == i % 4 { 1.0 } else { 0.0 }));
    let b = g.constant(Tensor::zeros(&[4]));
    let d = g.dense(x, eye, b).unwrap();
    assert_eq!(g.value(d), &xv);
}

#[test]
fn add_rejects_shape_mismatch() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::<f64>::ones(&[2]));
    let b = g.constant(Tensor::ones(&[3]));
    assert!(g.add(a, b).is_err());
    let s = g.constant(Tensor::ones(&[2]));
    assert!(g.scale(a, s).is_err());
}

#[test]
fn cross_entropy_uniform_logits_is_ln_k() {
    let mut g = Graph::<f64>::new();
    let z = g.constant(Tensor::zeros(&[3, 5]));
    let l = g.softmax_cross_entropy(z, &[0, 2, 4]).unwrap();
    assert!((g.item(l) - 5f64.ln()).abs() < 1e-15);
}

#[test]
fn cross_entropy_is_stable_for_huge_logits() {
    let mut g = Graph::<f64>::new();
    let z = g.constant(t(&[1, 3], &[1000.0, 0.0, -5.0]));
    let l = g.softmax_cross_entropy(z, &[1]).unwrap();
    assert!(g.item(l).is_finite());
    assert!((g.item(l) - 1000.0).abs() < 1e-9);
}

#[test]
fn cross_entropy_matches_log_sum_exp() {
    let zv = Tensor::<f64>::randn(&[2, 3], 2.0, &mut rng(9));
    let labels = [2, 0];
    let mut g = Graph::<f64>::new();
    let z = g.constant(zv.clone());
    let l = g.softmax_cross_entropy(z, &labels).unwrap();
    let mut expect = 0.0;
    for (row, &lab) in labels.iter().enumerate() {
        let zr = &zv.data()[row * 3..row * 3 + 3];
        let lse = zr.iter().map(|v| v.exp()).sum::<f64>().ln();
        expect += lse - zr[lab];
    }
    expect /= 2.0;
    assert!((g.item(l) - expect).abs() < 1e-12);
}

#[test]
fn cross_entropy_rejects_bad_label() {
    let mut g = Graph::<f64>::new();
    let z = g.constant(Tensor::<f64>::zeros(&[1, 3]));
    assert!(matches!(g.softmax_cross_entropy(z, &[3]), Err(Error::LabelOutOfRange { label: 3, classes: 3 })));
}

#[test]
fn stop_gradient_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::scalar(3.5));
    let sg = g.stop_gradient(x);
    assert_eq!(g.item(sg), 3.5);

    // d/dx [x + sg(x)] = 1
    let y = g.add(x, sg).unwrap();
    g.backward(y).unwrap();
    assert_eq!(g.grad(x).unwrap().item(), 1.0);

    // d/dx [sg(x²) · x] = x²
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::scalar(3.0));
    let sq = g.sum_squares(x);
    let frozen = g.stop_gradient(sq);
    let y = g.scale(x, frozen).unwrap();
    g.backward(y).unwrap();
    assert_eq!(g.grad(x).unwrap().item(), 9.0);
}

#[test]
fn backward_sum_of_squares() {
    let mut g = Graph::<f64>::new();
    let w = g.param(t(&[2], &[1.0, 2.0]));
    let l = g.sum_squares(w);
    g.backward(l).unwrap();
    assert_eq!(g.grad(w).unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn backward_of_independent_loss_is_zero() {
    let mut g = Graph::<f64>::new();
    let w = g.param(t(&[2], &[1.0, 2.0]));
    let other = g.param(Tensor::scalar(4.0));
    let l = g.affine(other, 2.0, 1.0);
    g.backward(l).unwrap();
    assert_eq!(g.grad(w).unwrap().data(), &[0.0, 0.0]);
    assert_eq!(g.grad(other).unwrap().item(), 2.0);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut g = Graph::<f64>::new();
    let w = g.param(t(&[2], &[1.0, 2.0]));
    let r = g.relu(w);
    assert!(matches!(g.backward(r), Err(Error::NonScalarLoss(_))));
}

#[test]
fn backward_accumulates_until_zeroed() {
    let mut g = Graph::<f64>::new();
    let w = g.param(t(&[2], &[1.0, 2.0]));
    let l = g.sum_squares(w);
    g.backward(l).unwrap();
    g.backward(l).unwrap();
    assert_eq!(g.grad(w).unwrap().data(), &[4.0, 8.0]);
    g.zero_grad();
    g.backward(l).unwrap();
    assert_eq!(g.grad(w).unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn every_tracked_node_gets_a_gradient() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::randn(&[1, 3, 3, 2], 1.0, &mut rng(4)));
    let w = g.param(Tensor::randn(&[2, 3], 1.0, &mut rng(5)));
    let y = g.pointwise_conv(x, w).unwrap();
    let r = g.relu(y);
    let l = g.sum(r);
    g.backward(l).unwrap();
    for v in [w, y, r, l] {
        assert!(g.grad(v).is_some());
        assert_eq!(g.grad(v).unwrap().shape(), g.value(v).shape());
    }
    assert!(g.grad(x).is_none());
}

#[test]
fn forward_is_bit_reproducible() {
    let build = || {
        let mut r = rng(21);
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::<f64>::randn(&[2, 5, 5, 3], 1.0, &mut r));
        let w = g.param(Tensor::randn(&[3, 6], 1.0, &mut r));
        let k = g.param(Tensor::randn(&[5, 5, 6], 1.0, &mut r));
        let h = g.pointwise_conv(x, w).unwrap();
        let d = g.depthwise_conv(h, k, 2).unwrap();
        let p = g.global_mean_pool(d).unwrap();
        g.value(p).clone()
    };
    assert_eq!(build().data(), build().data());
}

#[test]
fn sigmoid_is_stable_at_extremes() {
    assert_eq!(sigmoid(-1000.0f64), 0.0);
    assert_eq!(sigmoid(1000.0f64), 1.0);
    assert_eq!(sigmoid(0.0f32), 0.5);
}
