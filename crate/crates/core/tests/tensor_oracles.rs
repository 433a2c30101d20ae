//! Independent oracles for the tensor primitives: brute-force loops and
//! central finite differences.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ressenet::tensor::{grad_check, grad_check_multi, BnMode, Tape, Tensor};

const FD_EPS: f64 = 1e-5;
const FD_TOL: f64 = 1e-4;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Six nested loops, written without reference to im2col.
fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let [n, ci, h, wd] = x.shape().try_into().unwrap();
    let [co, _, k, _] = w.shape().try_into().unwrap();
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let mut out = Tensor::zeros(&[n, co, ho, wo]);
    for s in 0..n {
        for o in 0..co {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0f64;
                    for c in 0..ci {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x.data()[((s * ci + c) * h + iy as usize) * wd + ix as usize];
                                let wv = w.data()[((o * ci + c) * k + ky) * k + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    out.data_mut()[((s * co + o) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn conv_matches_direct_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random(&[1, 2, 5, 5], &mut rng);
    let w = random(&[3, 2, 3, 3], &mut rng);
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let wv = tape.leaf(w.clone());
    let y = tape.conv2d(xv, wv, 2, 1).unwrap();
    let oracle = naive_conv(&x, &w, 2, 1);
    assert_eq!(tape.shape(y), oracle.shape());
    assert!(tape.value(y).max_abs_diff(&oracle) < 1e-12);

    // the remaining kernel/stride/padding combinations used by the architecture
    for (k, s, p, h) in [(3, 1, 1, 6), (1, 2, 0, 6), (1, 1, 0, 4), (3, 2, 1, 8)] {
        let x = random(&[2, 3, h, h], &mut rng);
        let w = random(&[4, 3, k, k], &mut rng);
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let wv = tape.leaf(w.clone());
        let y = tape.conv2d(xv, wv, s, p).unwrap();
        assert!(tape.value(y).max_abs_diff(&naive_conv(&x, &w, s, p)) < 1e-12);
    }
}

#[test]
fn conv_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for (k, s, p) in [(3, 1, 1), (3, 2, 1), (1, 2, 0), (1, 1, 0)] {
        let x = random(&[2, 2, 5, 5], &mut rng);
        let w = random(&[3, 2, k, k], &mut rng);
        let y_shape = naive_conv(&x, &w, s, p).shape().to_vec();
        let probe = random(&y_shape, &mut rng);
        let rep = grad_check_multi(
            |t, v| {
                let y = t.conv2d(v[0], v[1], s, p)?;
                t.dot(y, &probe)
            },
            &[x, w],
            FD_EPS,
        )
        .unwrap();
        assert!(rep.passes(FD_TOL), "k={k} s={s} p={p}: {rep:?}");
    }
}

#[test]
fn linear_matches_naive_matmul() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = random(&[4, 7], &mut rng);
    let w = random(&[3, 7], &mut rng);
    let b = random(&[3], &mut rng);
    let mut tape = Tape::new();
    let (xv, wv, bv) = (tape.leaf(x.clone()), tape.leaf(w.clone()), tape.leaf(b.clone()));
    let y = tape.linear(xv, wv, bv).unwrap();
    let mut oracle = Tensor::zeros(&[4, 3]);
    for i in 0..4 {
        for j in 0..3 {
            let mut acc = b.data()[j];
            for k in 0..7 {
                acc += x.data()[i * 7 + k] * w.data()[j * 7 + k];
            }
            oracle.data_mut()[i * 3 + j] = acc;
        }
    }
    assert!(tape.value(y).max_abs_diff(&oracle) < 1e-12);

    let probe = random(&[4, 3], &mut rng);
    let rep = grad_check_multi(
        |t, v| {
            let y = t.linear(v[0], v[1], v[2])?;
            t.dot(y, &probe)
        },
        &[x, w, b],
        FD_EPS,
    )
    .unwrap();
    assert!(rep.passes(FD_TOL), "{rep:?}");
}

fn pairwise_sum(v: &[f64]) -> f64 {
    match v.len() {
        0 => 0.0,
        1 => v[0],
        n => pairwise_sum(&v[..n / 2]) + pairwise_sum(&v[n / 2..]),
    }
}

#[test]
fn global_pool_matches_pairwise_summation() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let x = random(&[2, 3, 7, 5], &mut rng);
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let y = tape.global_avg_pool(xv).unwrap();
    for p in 0..6 {
        let expect = pairwise_sum(&x.data()[p * 35..(p + 1) * 35]) / 35.0;
        assert!((tape.value(y).data()[p] - expect).abs() < 1e-12);
    }

    let big = Tensor::<f64>::zeros(&[1, 64, 32, 32]);
    let mut tape = Tape::new();
    let v = tape.leaf(big);
    let y = tape.global_avg_pool(v).unwrap();
    assert_eq!(tape.shape(y), &[1, 64, 1, 1]);
}

#[test]
fn elementwise_and_pool_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let x = random(&[2, 3, 4, 4], &mut rng);
    let probe = random(&[2, 3, 4, 4], &mut rng);
    let relu = grad_check(
        |t, v| {
            let y = t.relu(v);
            t.dot(y, &probe)
        },
        &x,
        FD_EPS,
    )
    .unwrap();
    assert!(relu.passes(FD_TOL), "relu {relu:?}");
    let x3 = x.map(|v| v * 3.0);
    let sig = grad_check(
        |t, v| {
            let y = t.sigmoid(v);
            t.dot(y, &probe)
        },
        &x3,
        FD_EPS,
    )
    .unwrap();
    assert!(sig.passes(FD_TOL), "sigmoid {sig:?}");

    let probe_g = random(&[2, 3, 1, 1], &mut rng);
    let gap = grad_check(
        |t, v| {
            let y = t.global_avg_pool(v)?;
            t.dot(y, &probe_g)
        },
        &x,
        FD_EPS,
    )
    .unwrap();
    assert!(gap.passes(FD_TOL), "gap {gap:?}");

    let probe_a = random(&[2, 3, 2, 2], &mut rng);
    let ap = grad_check(
        |t, v| {
            let y = t.avg_pool(v, 2)?;
            t.dot(y, &probe_a)
        },
        &x,
        FD_EPS,
    )
    .unwrap();
    assert!(ap.passes(FD_TOL), "avg_pool {ap:?}");
}

#[test]
fn sigmoid_gradient_is_s_times_one_minus_s() {
    let x = Tensor::<f64>::new(&[5], vec![-3.0, -0.5, 0.0, 0.7, 4.0]).unwrap();
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone().with_requires_grad());
    let y = tape.sigmoid(v);
    let l = tape.sum(y);
    tape.backward(l).unwrap();
    for (i, &g) in tape.grad(v).unwrap().iter().enumerate() {
        let s: f64 = 1.0 / (1.0 + (-x.data()[i]).exp());
        assert!((g - s * (1.0 - s)).abs() < 1e-15);
    }
}

#[test]
fn binary_op_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let a = random(&[2, 3, 3, 3], &mut rng);
    let b = random(&[2, 3, 3, 3], &mut rng);
    let probe = random(&[2, 3, 3, 3], &mut rng);
    let add = grad_check_multi(
        |t, v| {
            let y = t.add(v[0], v[1])?;
            t.dot(y, &probe)
        },
        &[a.clone(), b],
        FD_EPS,
    )
    .unwrap();
    assert!(add.passes(FD_TOL), "add {add:?}");

    let s = random(&[2, 3, 1, 1], &mut rng);
    let scale = grad_check_multi(
        |t, v| {
            let y = t.scale_channels(v[0], v[1])?;
            t.dot(y, &probe)
        },
        &[a.clone(), s.clone()],
        FD_EPS,
    )
    .unwrap();
    assert!(scale.passes(FD_TOL), "scale {scale:?}");

    // d/ds_c = sum over the channel plane of upstream * x
    let mut tape = Tape::new();
    let xv = tape.leaf(a.clone());
    let sv = tape.leaf(s.clone().with_requires_grad());
    let y = tape.scale_channels(xv, sv).unwrap();
    let l = tape.dot(y, &probe).unwrap();
    tape.backward(l).unwrap();
    for p in 0..6 {
        let expect: f64 = (0..9)
            .map(|j| probe.data()[p * 9 + j] * a.data()[p * 9 + j])
            .sum();
        assert!((tape.grad(sv).unwrap()[p] - expect).abs() < 1e-12);
    }
}

#[test]
fn batch_norm_gradients_both_modes() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let x = random(&[3, 2, 3, 3], &mut rng);
    let gamma = random(&[2], &mut rng).map(|v| v + 1.5);
    let beta = random(&[2], &mut rng);
    let probe = random(&[3, 2, 3, 3], &mut rng);
    let train = grad_check_multi(
        |t, v| {
            let (mut rm, mut rv) = (vec![0.0; 2], vec![1.0; 2]);
            let y = t.batch_norm(
                v[0],
                v[1],
                v[2],
                BnMode::Train {
                    running_mean: &mut rm,
                    running_var: &mut rv,
                    momentum: 0.1,
                },
                1e-5,
            )?;
            t.dot(y, &probe)
        },
        &[x.clone(), gamma.clone(), beta.clone()],
        FD_EPS,
    )
    .unwrap();
    assert!(train.passes(FD_TOL), "train {train:?}");

    let eval = grad_check_multi(
        |t, v| {
            let y = t.batch_norm(
                v[0],
                v[1],
                v[2],
                BnMode::Eval {
                    running_mean: &[0.1, -0.2],
                    running_var: &[0.8, 1.3],
                },
                1e-5,
            )?;
            t.dot(y, &probe)
        },
        &[x, gamma, beta],
        FD_EPS,
    )
    .unwrap();
    assert!(eval.passes(FD_TOL), "eval {eval:?}");
}

#[test]
fn cross_entropy_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let logits = random(&[4, 10], &mut rng).map(|v| v * 3.0);
    let labels = [3usize, 0, 9, 5];
    let rep = grad_check(|t, v| t.softmax_cross_entropy(v, &labels), &logits, FD_EPS).unwrap();
    assert!(rep.passes(FD_TOL), "{rep:?}");
}

#[test]
fn identical_inputs_give_bitwise_identical_outputs() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let x = random(&[2, 3, 8, 8], &mut rng).cast::<f32>();
        let w = random(&[4, 3, 3, 3], &mut rng).cast::<f32>().with_requires_grad();
        let mut tape = Tape::<f32>::new();
        let xv = tape.leaf(x);
        let wv = tape.leaf(w);
        let y = tape.conv2d(xv, wv, 1, 1).unwrap();
        let p = tape.global_avg_pool(y).unwrap();
        let l = tape.sum(p);
        tape.backward(l).unwrap();
        (tape.value(l).item().to_bits(), tape.grad(wv).unwrap().to_vec())
    };
    let (a, ga) = run();
    let (b, gb) = run();
    assert_eq!(a, b);
    assert!(ga.iter().zip(&gb).all(|(p, q)| p.to_bits() == q.to_bits()));
}

proptest! {
    #[test]
    fn conv_shape_law(h in 1usize..20, w in 1usize..20, k in prop::sample::select(vec![1usize, 3]),
                      s in 1usize..3, p in 0usize..3) {
        prop_assume!(h + 2 * p >= k && w + 2 * p >= k);
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::zeros(&[1, 2, h, w]));
        let wt = tape.leaf(Tensor::zeros(&[3, 2, k, k]));
        let y = tape.conv2d(x, wt, s, p).unwrap();
        prop_assert_eq!(tape.shape(y), &[1, 3, (h + 2 * p - k) / s + 1, (w + 2 * p - k) / s + 1][..]);
    }

    #[test]
    fn activation_ranges(v in prop::collection::vec(-500.0f64..500.0, 1..64)) {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[v.len()], v).unwrap());
        let s = tape.sigmoid(x);
        let r = tape.relu(x);
        prop_assert!(tape.value(s).data().iter().all(|&y| y > 0.0 && y < 1.0));
        prop_assert!(tape.value(r).data().iter().all(|&y| y >= 0.0));
    }

    #[test]
    fn uniform_logits_give_ln_k(k in 2usize..200, n in 1usize..5, c in -50.0f64..50.0) {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[n, k], c));
        let labels: Vec<usize> = (0..n).map(|i| i % k).collect();
        let l = tape.softmax_cross_entropy(x, &labels).unwrap();
        prop_assert!((tape.value(l).item() - (k as f64).ln()).abs() < 1e-9);
    }
}
