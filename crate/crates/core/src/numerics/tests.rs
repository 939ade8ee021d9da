use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Values bounded away from the ReLU kink.
fn jittered(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let mut t = random(shape, rng);
    for v in t.data_mut() {
        if v.abs() < 0.05 {
            *v += 0.1f64.copysign(*v);
        }
    }
    t
}

fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let [n, cin, h, wd] = x.dims4();
    let cout = w.dims4()[0];
    let mut out = vec![0.0; n * cout * h * wd];
    for i in 0..n {
        for co in 0..cout {
            for y in 0..h {
                for xx in 0..wd {
                    let mut acc = b.data()[co];
                    for ci in 0..cin {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = y as isize + ky as isize - 1;
                                let ix = xx as isize + kx as isize - 1;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x.at4(i, ci, iy as usize, ix as usize) * w.at4(co, ci, ky, kx);
                            }
                        }
                    }
                    out[((i * cout + co) * h + y) * wd + xx] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn conv_of_ones_sums_the_window() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
    let w = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
    let b = g.constant(Tensor::zeros(&[1]));
    let y = g.conv2d(x, w, b).unwrap();
    assert_eq!(g.value(y).at4(0, 0, 1, 1), 9.0);
    assert_eq!(g.value(y).at4(0, 0, 0, 0), 4.0);
}

#[test]
fn conv_with_zero_weights_is_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut g = Graph::<f64>::new();
    let x = g.constant(random(&[2, 3, 5, 5], &mut rng));
    let w = g.constant(Tensor::zeros(&[4, 3, 3, 3]));
    let b = g.constant(Tensor::zeros(&[4]));
    let y = g.conv2d(x, w, b).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn conv_matches_nested_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..5 {
        let (x, w, b) = (random(&[2, 3, 5, 5], &mut rng), random(&[4, 3, 3, 3], &mut rng), random(&[4], &mut rng));
        let expected = naive_conv(&x, &w, &b);
        let mut g = Graph::new();
        let (xv, wv, bv) = (g.constant(x), g.constant(w), g.constant(b));
        let y = g.conv2d(xv, wv, bv).unwrap();
        for (a, e) in g.value(y).data().iter().zip(&expected) {
            assert!((a - e).abs() < 1e-12, "{a} vs {e}");
        }
    }
}

#[test]
fn conv_rejects_mismatched_shapes() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[1, 2, 4, 4]));
    let w = g.constant(Tensor::zeros(&[1, 3, 3, 3]));
    let b = g.constant(Tensor::zeros(&[1]));
    assert!(matches!(g.conv2d(x, w, b), Err(crate::Error::Shape(_))));
}

#[test]
fn relu_forward_and_subgradient() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::from_vec(&[3], vec![-1.0, 0.0, 2.0]).unwrap());
    let y = g.relu(x);
    assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[0.0, 0.0, 1.0]);

    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::from_vec(&[2], vec![-1.0, 2.0]).unwrap());
    let y = g.relu(x);
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[0.0, 1.0]);

    let mut g = Graph::<f64>::new();
    let pos = Tensor::from_vec(&[4], vec![0.5, 1.0, 3.0, 1e-3]).unwrap();
    let x = g.constant(pos.clone());
    let y = g.relu(x);
    assert_eq!(g.value(y), &pos);
}

#[test]
fn softmax_uniform_and_stable() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::full(&[1, 4, 2, 2], 3.0));
    let y = g.softmax_channel(x).unwrap();
    assert!(g.value(y).data().iter().all(|&p| (p - 0.25).abs() < 1e-15));

    let x = g.constant(Tensor::from_vec(&[1, 2, 1, 1], vec![1000.0, 0.0]).unwrap());
    let y = g.softmax_channel(x).unwrap();
    let p = g.value(y).data();
    assert!((p[0] - 1.0).abs() < 1e-12 && p[1] >= 0.0 && p[1] < 1e-300);
}

#[test]
fn softmax_matches_direct_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random(&[1, 3, 2, 2], &mut rng);
    let y = softmax_channel_values(&x);
    for h in 0..2 {
        for w in 0..2 {
            let denom: f64 = (0..3).map(|c| x.at4(0, c, h, w).exp()).sum();
            for c in 0..3 {
                assert!((y.at4(0, c, h, w) - x.at4(0, c, h, w).exp() / denom).abs() < 1e-15);
            }
        }
    }
}

#[test]
fn softmax_channel_sums_stay_normalized_for_large_logits() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..20 {
        let mut x = random(&[2, 5, 3, 3], &mut rng);
        x.data_mut().iter_mut().for_each(|v| *v *= 1e4);
        let y = softmax_channel_values(&x);
        for i in 0..2 {
            for p in 0..9 {
                let s: f64 = (0..5).map(|c| y.data()[(i * 5 + c) * 9 + p]).sum();
                assert!((s - 1.0).abs() <= 1e-9);
            }
        }
    }
}

#[test]
fn backward_of_sum_and_half_square() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x0 = random(&[2, 3], &mut rng);
    let mut g = Graph::new();
    let x = g.param(x0.clone());
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert!(g.grad(x).unwrap().iter().all(|&v| v == 1.0));

    let mut g = Graph::new();
    let x = g.param(x0.clone());
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq);
    let half = g.scale(s, 0.5);
    g.backward(half).unwrap();
    for (gv, xv) in g.grad(x).unwrap().iter().zip(x0.data()) {
        assert!((gv - xv).abs() < 1e-15);
    }
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::zeros(&[2]));
    assert!(g.backward(x).is_err());
}

#[test]
fn unreachable_gradients_are_untouched() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::full(&[2], 1.0));
    let other = g.param(Tensor::full(&[2], 1.0));
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert!(g.grad(other).is_none());
}

#[test]
fn no_grad_graph_records_nothing() {
    let mut g = Graph::<f64>::no_grad();
    let x = g.param(Tensor::full(&[1, 2, 3, 3], 1.0));
    let y = g.relu(x);
    let _ = g.softmax_channel(y).unwrap();
    assert_eq!(g.num_records(), 0);
}

#[test]
fn grad_check_exact_for_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&[3, 4], &mut rng);
    assert!(grad_check(|g, v| g.sum(v), &x, 1e-5) < 1e-10);
}

#[test]
fn grad_check_sum_of_squares() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&[10], &mut rng);
    let err = grad_check(
        |g, v| {
            let sq = g.mul(v, v).unwrap();
            g.sum(sq)
        },
        &x,
        1e-5,
    );
    assert!(err < 1e-7, "{err}");
}

#[test]
fn grad_check_every_op_on_twenty_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let x = jittered(&[2, 2, 4, 4], &mut rng);
        let w = random(&[3, 2, 3, 3], &mut rng);
        let b = random(&[3], &mut rng);
        let r = random(&[2, 3, 4, 4], &mut rng);
        let (w1, b1, r1) = (w.clone(), b.clone(), r.clone());
        let conv_input = grad_check(
            move |g, v| {
                let (wv, bv, rv) = (g.constant(w1.clone()), g.constant(b1.clone()), g.constant(r1.clone()));
                let y = g.conv2d(v, wv, bv).unwrap();
                let m = g.mul(y, rv).unwrap();
                g.sum(m)
            },
            &x,
            1e-5,
        );
        let (x2, b2, r2) = (x.clone(), b.clone(), r.clone());
        let conv_weight = grad_check(
            move |g, v| {
                let (xv, bv, rv) = (g.constant(x2.clone()), g.constant(b2.clone()), g.constant(r2.clone()));
                let y = g.conv2d(xv, v, bv).unwrap();
                let m = g.mul(y, rv).unwrap();
                g.sum(m)
            },
            &w,
            1e-5,
        );
        let (x3, w3, r3) = (x.clone(), w.clone(), r.clone());
        let conv_bias = grad_check(
            move |g, v| {
                let (xv, wv, rv) = (g.constant(x3.clone()), g.constant(w3.clone()), g.constant(r3.clone()));
                let y = g.conv2d(xv, wv, v).unwrap();
                let m = g.mul(y, rv).unwrap();
                g.sum(m)
            },
            &b,
            1e-5,
        );
        let rr = random(&[2, 2, 4, 4], &mut rng);
        let relu = grad_check(
            |g, v| {
                let y = g.relu(v);
                let rv = g.constant(rr.clone());
                let m = g.mul(y, rv).unwrap();
                g.sum(m)
            },
            &x,
            1e-5,
        );
        let softmax = grad_check(
            |g, v| {
                let y = g.softmax_channel(v).unwrap();
                let rv = g.constant(rr.clone());
                let m = g.mul(y, rv).unwrap();
                g.sum(m)
            },
            &x,
            1e-5,
        );
        let labels: Vec<u8> = (0..32).map(|_| if rng.random_bool(0.1) { 255 } else { rng.random_range(0..2) }).collect();
        let ce = grad_check(|g, v| g.cross_entropy(v, &labels, &[0.7, 0.3]).unwrap(), &x, 1e-5);
        for (name, err) in [("conv/x", conv_input), ("conv/w", conv_weight), ("conv/b", conv_bias), ("relu", relu), ("softmax", softmax), ("ce", ce)] {
            assert!(err < 1e-4, "{name}: {err}");
        }
    }
}

#[test]
fn composed_conv_relu_softmax_ce_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..20 {
        let x = random(&[1, 3, 6, 6], &mut rng);
        let w1 = random(&[4, 3, 3, 3], &mut rng);
        let w2 = random(&[3, 4, 3, 3], &mut rng);
        let labels: Vec<u8> = (0..36).map(|_| rng.random_range(0..3)).collect();
        let err = grad_check(
            |g, v| {
                let xv = g.constant(x.clone());
                let b1 = g.constant(Tensor::full(&[4], 0.1));
                let h = g.conv2d(xv, v, b1).unwrap();
                let h = g.relu(h);
                let w2v = g.constant(w2.clone());
                let b2 = g.constant(Tensor::zeros(&[3]));
                let logits = g.conv2d(h, w2v, b2).unwrap();
                g.cross_entropy(logits, &labels, &[1.0]).unwrap()
            },
            &w1,
            1e-5,
        );
        assert!(err < 1e-4, "{err}");
    }
}

#[test]
fn backward_is_bit_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random(&[2, 3, 8, 8], &mut rng);
    let w = random(&[4, 3, 3, 3], &mut rng);
    let labels: Vec<u8> = (0..128).map(|_| rng.random_range(0..4)).collect();
    let run = || {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let wv = g.param(w.clone());
        let bv = g.param(Tensor::zeros(&[4]));
        let y = g.conv2d(xv, wv, bv).unwrap();
        let l = g.cross_entropy(y, &labels, &[1.0]).unwrap();
        g.backward(l).unwrap();
        (g.grad(wv).unwrap().to_vec(), g.grad(bv).unwrap().to_vec())
    };
    let (a, b) = (run(), run());
    assert!(a.0.iter().zip(&b.0).all(|(p, q)| p.to_bits() == q.to_bits()));
    assert!(a.1.iter().zip(&b.1).all(|(p, q)| p.to_bits() == q.to_bits()));
}

#[test]
fn injected_fault_is_detected() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = jittered(&[4], &mut rng);
    let mut g = Graph::<f64>::new();
    g.inject_fault(OpKind::Relu);
    let v = g.param(x.clone());
    let y = g.relu(v);
    let s = g.sum(y);
    g.backward(s).unwrap();
    let expected: Vec<f64> = x.data().iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect();
    assert_ne!(g.grad(v).unwrap(), &expected[..]);
}

#[test]
fn f32_conv_agrees_with_f64() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let (x, w, b) = (random(&[1, 3, 8, 8], &mut rng), random(&[5, 3, 3, 3], &mut rng), random(&[5], &mut rng));
    let expected = naive_conv(&x, &w, &b);
    let mut g = Graph::<f32>::new();
    let (xv, wv, bv) = (g.constant(x.cast()), g.constant(w.cast()), g.constant(b.cast()));
    let y = g.conv2d(xv, wv, bv).unwrap();
    for (a, e) in g.value(y).data().iter().zip(&expected) {
        assert!((*a as f64 - e).abs() < 1e-5);
    }
}
