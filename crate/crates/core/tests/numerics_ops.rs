use combogait::numerics::{gradcheck, BnStats, Mode, Tape, Tensor, TensorError, GRADCHECK_STEP};
use combogait::oracle::{check_ops, op_registry, probe};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape, data.to_vec()).unwrap()
}

// ---- matmul ----------------------------------------------------------

fn matmul_oracle(a: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for l in 0..k {
                s += a.at(&[i, l]) * b.at(&[l, j]);
            }
            out[i * n + j] = s;
        }
    }
    out
}

#[test]
fn matmul_examples() {
    let mut tape = Tape::new();
    let i2 = tape.constant(Tensor::eye(2));
    let b = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
    let y = tape.matmul(i2, b).unwrap();
    assert_eq!(tape.value(y).data(), &[1., 2., 3., 4.]);

    let a = tape.constant(t(&[1, 2], &[1., 2.]));
    let b = tape.constant(t(&[2, 1], &[3., 4.]));
    let y = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(y).data(), &[11.]);
}

#[test]
fn matmul_matches_triple_loop_seed7() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = rand_tensor(&[3, 4], &mut rng);
    let b = rand_tensor(&[4, 2], &mut rng);
    let mut tape = Tape::new();
    let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let y = tape.matmul(va, vb).unwrap();
    for (x, o) in tape.value(y).data().iter().zip(matmul_oracle(&a, &b)) {
        assert!((x - o).abs() < 1e-12);
    }
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[4, 2]));
    let err = tape.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
}

#[test]
fn matmul_batched_broadcast() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = rand_tensor(&[2, 3, 2, 4], &mut rng);
    let b = rand_tensor(&[3, 4, 5], &mut rng);
    let mut tape = Tape::new();
    let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let y = tape.matmul(va, vb).unwrap();
    assert_eq!(tape.shape(y), &[2, 3, 2, 5]);
    for p in 0..2 {
        for q in 0..3 {
            let sa = Tensor::from_fn(&[2, 4], |i| a.at(&[p, q, i / 4, i % 4]));
            let sb = Tensor::from_fn(&[4, 5], |i| b.at(&[q, i / 5, i % 5]));
            let o = matmul_oracle(&sa, &sb);
            for i in 0..2 {
                for j in 0..5 {
                    assert!((tape.value(y).at(&[p, q, i, j]) - o[i * 5 + j]).abs() < 1e-12);
                }
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]
    #[test]
    fn matmul_agrees_with_oracle(m in 1usize..=8, k in 1usize..=8, n in 1usize..=8, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_tensor(&[m, k], &mut rng);
        let b = rand_tensor(&[k, n], &mut rng);
        let mut tape = Tape::new();
        let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let y = tape.matmul(va, vb).unwrap();
        for (x, o) in tape.value(y).data().iter().zip(matmul_oracle(&a, &b)) {
            prop_assert!((x - o).abs() <= 1e-10 * o.abs().max(1.0));
        }
    }

    #[test]
    fn softmax_rows_are_distributions(n in 1usize..=12, rows in 1usize..=4, scale in 0.1f64..50.0, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::from_fn(&[rows, n], |_| rng.random_range(-scale..scale));
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let y = tape.softmax(v);
        for row in tape.value(y).data().chunks(n) {
            let s: f64 = row.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
            prop_assert!(row.iter().all(|&p| p > 0.0 && p <= 1.0));
        }
    }
}

// ---- conv2d ----------------------------------------------------------

fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let (b, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let mut out = Tensor::zeros(&[b, co, ho, wo]);
    for n in 0..b {
        for o in 0..co {
            for y in 0..ho {
                for xx in 0..wo {
                    let mut s = 0.0;
                    for c in 0..ci {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (xx * stride + kx) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    s += x.at(&[n, c, iy as usize, ix as usize]) * w.at(&[o, c, ky, kx]);
                                }
                            }
                        }
                    }
                    let off = out.offset(&[n, o, y, xx]);
                    out.data_mut()[off] = s;
                }
            }
        }
    }
    out
}

#[test]
fn conv_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::<f64>::ones(&[1, 1, 3, 3]));
    let k = tape.constant(t(&[1, 1, 1, 1], &[2.0]));
    let y = tape.conv2d(x, k, 1, 0).unwrap();
    assert_eq!(tape.value(y).data(), &[2.0; 9]);

    let x = tape.constant(Tensor::<f64>::ones(&[1, 1, 4, 4]));
    let k = tape.constant(Tensor::ones(&[1, 1, 2, 2]));
    let y = tape.conv2d(x, k, 2, 0).unwrap();
    assert_eq!(tape.shape(y), &[1, 1, 2, 2]);

    let k = tape.constant(Tensor::ones(&[1, 1, 5, 5]));
    assert!(matches!(tape.conv2d(x, k, 1, 0), Err(TensorError::Shape { .. })));
}

#[test]
fn conv_matches_naive_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = rand_tensor(&[2, 3, 8, 8], &mut rng);
    let w = rand_tensor(&[4, 3, 3, 3], &mut rng);
    let mut tape = Tape::new();
    let (vx, vw) = (tape.constant(x.clone()), tape.constant(w.clone()));
    let y = tape.conv2d(vx, vw, 1, 1).unwrap();
    let o = conv_oracle(&x, &w, 1, 1);
    assert_eq!(tape.shape(y), o.shape());
    assert!(tape.value(y).max_abs_diff(&o) < 1e-10);
    // strided, padded, rectangular
    let x = rand_tensor(&[1, 2, 7, 5], &mut rng);
    let w = rand_tensor(&[3, 2, 3, 3], &mut rng);
    let (vx, vw) = (tape.constant(x.clone()), tape.constant(w.clone()));
    let y = tape.conv2d(vx, vw, 2, 1).unwrap();
    assert!(tape.value(y).max_abs_diff(&conv_oracle(&x, &w, 2, 1)) < 1e-10);
}

// ---- softmax and elementwise -------------------------------------------

#[test]
fn softmax_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[3], &[0., 0., 0.]));
    let y = tape.softmax(x);
    for p in tape.value(y).data() {
        assert!((p - 1.0 / 3.0).abs() < 1e-15);
    }
    let x = tape.constant(t(&[2], &[1000., 0.]));
    let y = tape.softmax(x);
    let d = tape.value(y).data();
    assert!(d.iter().all(|v| v.is_finite()));
    assert!((d[0] - 1.0).abs() < 1e-12 && d[1] < 1e-300);
}

#[test]
fn softmax_matches_direct_formula() {
    // The oracle sums in a fixed different order (descending exponent)
    // without max subtraction; inputs are small so exp() is safe.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_tensor(&[5], &mut rng);
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let y = tape.softmax(v);
    let mut e: Vec<f64> = x.data().iter().map(|v| v.exp()).collect();
    let mut sorted = e.clone();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let z: f64 = sorted.iter().sum();
    e.iter_mut().for_each(|v| *v /= z);
    for (a, b) in tape.value(y).data().iter().zip(e) {
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn elementwise_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[2], &[-1., 2.]));
    let r = tape.relu(x);
    assert_eq!(tape.value(r).data(), &[0., 2.]);

    let x = tape.param(t(&[3], &[3., 7., 7.]));
    let m = tape.max_axis(x, 0).unwrap();
    assert_eq!(tape.value(m).data(), &[7.]);
    tape.backward(m).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[0., 1., 0.]);

    let x = tape.constant(Tensor::from_fn(&[8], |i| (i + 1) as f64));
    let m = tape.mean(x);
    assert_eq!(tape.value(m).data(), &[4.5]);

    let a = tape.constant(t(&[2], &[1., 2.]));
    let b = tape.constant(t(&[3], &[1., 2., 3.]));
    assert!(matches!(tape.add(a, b), Err(TensorError::Shape { .. })));
}

// ---- batch norm and dropout ---------------------------------------------

#[test]
fn batch_norm_constant_batch_gives_beta() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::full(&[4, 2], 3.0));
    let g = tape.constant(t(&[2], &[1.5, 2.0]));
    let b = tape.constant(t(&[2], &[0.25, -1.0]));
    let mut st = BnStats::new(2);
    let y = tape.batch_norm(x, g, b, &mut st, Mode::Train, 1e-5).unwrap();
    for r in tape.value(y).data().chunks(2) {
        assert_eq!(r, &[0.25, -1.0]);
    }
}

#[test]
fn batch_norm_normalizes_batch() {
    // feature mean 5, population variance 4
    let col = [3.0, 7.0, 3.0, 7.0];
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::from_fn(&[4, 1], |i| col[i]));
    let g = tape.constant(Tensor::ones(&[1]));
    let b = tape.constant(Tensor::zeros(&[1]));
    let mut st = BnStats::new(1);
    let y = tape.batch_norm(x, g, b, &mut st, Mode::Train, 1e-5).unwrap();
    let d = tape.value(y).data();
    let mean = d.iter().sum::<f64>() / 4.0;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
    assert!(mean.abs() < 1e-9 && (var - 1.0).abs() < 1e-4);
    // running stats moved towards the batch by 0.1
    assert!((st.mean[0] - 0.5).abs() < 1e-12);
    assert!((st.var[0] - (0.9 + 0.1 * 16.0 / 3.0)).abs() < 1e-12);
}

#[test]
fn batch_norm_eval_identity_stats() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let xv = rand_tensor(&[3, 2], &mut rng);
    let mut tape = Tape::new();
    let x = tape.constant(xv.clone());
    let g = tape.constant(t(&[2], &[2.0, -0.5]));
    let b = tape.constant(t(&[2], &[0.1, 0.2]));
    let mut st = BnStats::new(2);
    let y = tape.batch_norm(x, g, b, &mut st, Mode::Eval, 1e-5).unwrap();
    for i in 0..3 {
        for (j, (gg, bb)) in [(2.0, 0.1), (-0.5, 0.2)].into_iter().enumerate() {
            let want = gg * xv.at(&[i, j]) + bb;
            assert!((tape.value(y).at(&[i, j]) - want).abs() < 1e-5);
        }
    }
    assert_eq!(st, BnStats::new(2));
}

#[test]
fn batch_norm_single_sample_train_is_degenerate() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::<f64>::ones(&[1, 3]));
    let g = tape.constant(Tensor::ones(&[3]));
    let b = tape.constant(Tensor::zeros(&[3]));
    let mut st = BnStats::new(3);
    assert!(matches!(
        tape.batch_norm(x, g, b, &mut st, Mode::Train, 1e-5),
        Err(TensorError::DegenerateBatch(1))
    ));
}

#[test]
fn dropout_modes() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::<f64>::ones(&[10]));
    assert_eq!(tape.dropout(x, 0.0, Mode::Train, &mut rng).unwrap(), x);
    assert_eq!(tape.dropout(x, 0.7, Mode::Eval, &mut rng).unwrap(), x);
    assert!(tape.dropout(x, 1.0, Mode::Train, &mut rng).is_err());
}

#[test]
fn dropout_mean_within_three_sigma() {
    // Each output is 0 or 2 with probability 1/2: mean 1, per-element sd 1,
    // so the sample mean of 1e4 elements has sd 0.01.
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::<f64>::ones(&[10_000]));
    let y = tape.dropout(x, 0.5, Mode::Train, &mut rng).unwrap();
    let d = tape.value(y).data();
    assert!(d.iter().all(|&v| v == 0.0 || v == 2.0));
    let mean = d.iter().sum::<f64>() / 1e4;
    assert!((mean - 1.0).abs() < 0.03, "{mean}");
}

// ---- backward -----------------------------------------------------------

#[test]
fn backward_examples() {
    let mut tape = Tape::new();
    let x = tape.param(t(&[3], &[1., -2., 5.]));
    let s = tape.sum(x);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[1., 1., 1.]);

    let mut tape = Tape::new();
    let x = tape.param(t(&[2], &[1., 2.]));
    let sq = tape.mul(x, x).unwrap();
    let l = tape.sum(sq);
    tape.backward(l).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[2., 4.]);
    // without reset, a second call accumulates
    tape.backward(l).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[4., 8.]);
    tape.zero_grad();
    assert!(tape.grad(x).is_none());

    assert!(matches!(tape.backward(sq), Err(TensorError::NonScalarLoss(_))));
}

#[test]
fn backward_is_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut tape = Tape::new();
        let a = tape.param(rand_tensor(&[4, 6], &mut rng));
        let b = tape.param(rand_tensor(&[6, 3], &mut rng));
        let y = tape.matmul(a, b).unwrap();
        let s = tape.softmax(y);
        let l = tape.mean(s);
        let l2 = tape.mul(l, l).unwrap();
        tape.backward(l2).unwrap();
        (tape.grad(a).unwrap().to_vec(), tape.grad(b).unwrap().to_vec())
    };
    let (a1, b1) = run();
    let (a2, b2) = run();
    assert!(a1.iter().zip(&a2).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert!(b1.iter().zip(&b2).all(|(x, y)| x.to_bits() == y.to_bits()));
}

// ---- gradient oracle sweep ----------------------------------------------

#[test]
fn every_operation_passes_gradcheck_over_ten_seeds() {
    for (name, shapes, _) in op_registry() {
        assert!(shapes.iter().all(|s| s.iter().product::<usize>() <= 64), "{name}");
    }
    for check in check_ops(10).unwrap() {
        assert!(check.passed(), "{check:?}");
    }
}

#[test]
fn gradcheck_softmax_matmul_chain() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let x = rand_tensor(&[4, 4], &mut rng);
    let w = rand_tensor(&[4, 4], &mut rng);
    let err = gradcheck(
        move |t, x| {
            let w = t.constant(w.clone());
            let y = t.matmul(x, w)?;
            let s = t.softmax(y);
            probe(t, s)
        },
        &x,
        GRADCHECK_STEP,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn gradcheck_flags_wrong_adjoint() {
    // x² with an adjoint of 4x instead of 2x
    let x = t(&[3], &[0.5, -1.5, 2.0]);
    let err = gradcheck(
        |tape, x| {
            let v = tape.value(x).clone();
            let y = Tensor::new(v.shape(), v.data().iter().map(|e| e * e).collect())?;
            let y = tape.custom(&[x], y, |g, inputs| {
                let d = g.data().iter().zip(inputs[0].data()).map(|(g, x)| 4.0 * x * g).collect();
                vec![Tensor::new(inputs[0].shape(), d).unwrap()]
            });
            Ok(tape.sum(y))
        },
        &x,
        GRADCHECK_STEP,
    )
    .unwrap();
    assert!((err - 1.0 / 3.0).abs() < 1e-6, "{err}");
    assert!(err > 1e-4);
}
