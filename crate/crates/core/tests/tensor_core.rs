use infnet::gradcheck::{grad_check, grad_check_many};
use infnet::tape::Tape;
use infnet::tensor::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn values(tape: &Tape<f64>, v: infnet::tape::Var) -> Vec<f64> {
    tape.value(v).data().to_vec()
}

#[test]
fn matmul_examples() {
    let mut tape = Tape::<f64>::new();
    let i2 = tape.constant(Tensor::identity(2));
    let m = tape.constant(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap());
    let p = tape.matmul(i2, m).unwrap();
    assert_eq!(values(&tape, p), vec![1.0, 2.0, 3.0, 4.0]);

    let a = tape.constant(Tensor::from_rows(&[&[1.0, 2.0]]).unwrap());
    let b = tape.constant(Tensor::from_rows(&[&[3.0], &[4.0]]).unwrap());
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.shape(c), &[1, 1]);
    assert_eq!(values(&tape, c), vec![11.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    let msg = tape.matmul(a, b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
}

#[test]
fn matmul_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_tensor(&mut rng, &[3, 4]);
    let b = rand_tensor(&mut rng, &[4, 2]);
    let w = rand_tensor(&mut rng, &[3, 2]);
    let report = grad_check_many(
        |t, v| {
            let c = t.matmul(v[0], v[1])?;
            let wv = t.constant(w.clone());
            let cw = t.mul(c, wv)?;
            Ok(t.sum(cw))
        },
        &[a, b],
        1e-4,
        1e-5,
    )
    .unwrap();
    assert!(report.passed, "{report:?}");
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::<f64>::new();
    let z = tape.constant(Tensor::zeros(&[1, 4]));
    let s = tape.softmax_rows(z).unwrap();
    assert_eq!(values(&tape, s), vec![0.25; 4]);

    let x = tape.constant(Tensor::from_rows(&[&[1f64.ln(), 3f64.ln()]]).unwrap());
    let s = tape.softmax_rows(x).unwrap();
    let v = values(&tape, s);
    assert!((v[0] - 0.25).abs() < 1e-15 && (v[1] - 0.75).abs() < 1e-15);
}

#[test]
fn softmax_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_tensor(&mut rng, &[2, 5]);
    let w = rand_tensor(&mut rng, &[2, 5]);
    let r = grad_check(
        |t, v| {
            let s = t.softmax_rows(v)?;
            let wv = t.constant(w.clone());
            let p = t.mul(s, wv)?;
            Ok(t.sum(p))
        },
        &x,
        1e-4,
        1e-5,
    )
    .unwrap();
    assert!(r.passed, "{r:?}");
}

#[test]
fn masked_softmax_zeroes_masked_and_empty_rows() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::from_rows(&[&[1.0, 50.0, 2.0]]).unwrap());
    let s = tape.softmax_rows_masked(x, &[true, false, true]).unwrap();
    let v = values(&tape, s);
    assert_eq!(v[1], 0.0);
    assert!((v[0] + v[2] - 1.0).abs() < 1e-15);
    let s = tape.softmax_rows_masked(x, &[false, false, false]).unwrap();
    assert_eq!(values(&tape, s), vec![0.0; 3]);
}

#[test]
fn sigmoid_examples_and_gradcheck() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::from_f64(&[4], &[0.0, 3f64.ln(), 1e3, -1e3]).unwrap());
    let s = tape.sigmoid(x);
    let v = values(&tape, s);
    assert_eq!(v[0], 0.5);
    assert!((v[1] - 0.75).abs() < 1e-15);
    assert!(v[2] < 1.0 && v[3] > 0.0 && v.iter().all(|x| x.is_finite()));

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&mut rng, &[3, 3]);
    let r = grad_check(
        |t, v| {
            let s = t.sigmoid(v);
            Ok(t.sum(s))
        },
        &x,
        1e-4,
        1e-6,
    )
    .unwrap();
    assert!(r.passed, "{r:?}");
}

#[test]
fn elementwise_examples() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap());
    let b = tape.constant(Tensor::from_f64(&[2], &[3.0, 4.0]).unwrap());
    let s = tape.add(a, b).unwrap();
    assert_eq!(values(&tape, s), vec![4.0, 6.0]);

    let ones = tape.constant(Tensor::filled(&[2], 1.0));
    let m = tape.mul(a, ones).unwrap();
    assert_eq!(values(&tape, m), vec![1.0, 2.0]);

    let neg = tape.constant(Tensor::from_f64(&[2], &[-1.0, 2.0]).unwrap());
    let r = tape.relu(neg);
    assert_eq!(values(&tape, r), vec![0.0, 2.0]);

    let sc = tape.scale(a, 3.0);
    assert_eq!(values(&tape, sc), vec![3.0, 6.0]);

    let bad = tape.constant(Tensor::zeros(&[3]));
    assert!(tape.add(a, bad).is_err());
    assert!(tape.mul(a, bad).is_err());
}

#[test]
fn shape_ops_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::from_rows(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]).unwrap());
    let f = tape.flatten(x);
    assert_eq!(tape.shape(f), &[6]);
    assert_eq!(values(&tape, f), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);

    let r = tape.reshape(f, &[3, 2]).unwrap();
    let back = tape.flatten(r);
    assert_eq!(values(&tape, back), values(&tape, f));
    assert!(tape.reshape(f, &[4, 2]).is_err());

    let a = tape.constant(Tensor::zeros(&[2, 4]));
    let b = tape.constant(Tensor::filled(&[3, 4], 1.0));
    let c = tape.concat_rows(&[a, b]).unwrap();
    assert_eq!(tape.shape(c), &[5, 4]);
    let s = tape.slice_rows(c, 2, 3).unwrap();
    assert_eq!(values(&tape, s), vec![1.0; 12]);
    let wrong = tape.constant(Tensor::zeros(&[1, 3]));
    assert!(tape.concat_rows(&[a, wrong]).is_err());
}

#[test]
fn reductions() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap());
    let s = tape.sum_rows(x).unwrap();
    assert_eq!(tape.shape(s), &[1, 2]);
    assert_eq!(values(&tape, s), vec![4.0, 6.0]);

    let y = tape.param(Tensor::from_f64(&[2], &[2.0, 4.0]).unwrap());
    let m = tape.mean(y);
    assert_eq!(tape.value(m).item(), 3.0);
    tape.backward(m).unwrap();
    assert_eq!(tape.grad(y).unwrap(), &[0.5, 0.5]);
}

#[test]
fn backward_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::from_f64(&[3], &[0.3, -1.0, 2.0]).unwrap());
    let s = tape.sum(x);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap());
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum(sq);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0]);

    // repeated backward accumulates, zero_grad resets
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[4.0, 8.0]);
    tape.zero_grad();
    assert!(tape.grad(x).is_none());

    assert!(
        tape.backward(sq).is_err(),
        "non-scalar loss must be rejected"
    );
}

#[test]
fn fan_out_sums_contributions() {
    // f(x) = sum(sigmoid(x) ⊙ x + 3x): both consumers of x contribute
    let xs = [0.7, -0.2, 1.5];
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::from_f64(&[3], &xs).unwrap());
    let s = tape.sigmoid(x);
    let p = tape.mul(s, x).unwrap();
    let t = tape.scale(x, 3.0);
    let q = tape.add(p, t).unwrap();
    let l = tape.sum(q);
    tape.backward(l).unwrap();
    let g = tape.grad(x).unwrap();
    for (k, &xv) in xs.iter().enumerate() {
        let sg = 1.0 / (1.0 + (-xv).exp());
        let expected = sg * (1.0 - sg) * xv + sg + 3.0;
        assert!((g[k] - expected).abs() < 1e-14);
    }
}

#[test]
fn every_differentiable_op_passes_gradcheck_on_ten_seeds() {
    type Build =
        fn(&mut Tape<f64>, &[infnet::tape::Var]) -> infnet::error::Result<infnet::tape::Var>;
    let cases: Vec<(&str, Vec<Vec<usize>>, Build)> = vec![
        ("matmul", vec![vec![3, 4], vec![4, 2]], |t, v| {
            let c = t.matmul(v[0], v[1])?;
            let s = t.sigmoid(c);
            Ok(t.sum(s))
        }),
        ("transpose", vec![vec![2, 3]], |t, v| {
            let x = t.transpose(v[0])?;
            let y = t.matmul(x, v[0])?;
            Ok(t.sum(y))
        }),
        ("add_sub_mul", vec![vec![2, 3], vec![2, 3]], |t, v| {
            let a = t.add(v[0], v[1])?;
            let b = t.sub(v[0], v[1])?;
            let c = t.mul(a, b)?;
            Ok(t.sum(c))
        }),
        (
            "row_broadcast",
            vec![vec![3, 4], vec![1, 4], vec![1, 4]],
            |t, v| {
                let a = t.add_row(v[0], v[1])?;
                let b = t.mul_row(a, v[2])?;
                let c = t.mul(b, b)?;
                Ok(t.mean(c))
            },
        ),
        ("relu", vec![vec![4, 3]], |t, v| {
            let r = t.relu(v[0]);
            let s = t.mul(r, v[0])?;
            Ok(t.sum(s))
        }),
        ("softmax", vec![vec![3, 4], vec![3, 4]], |t, v| {
            let s = t.softmax_rows(v[0])?;
            let p = t.mul(s, v[1])?;
            Ok(t.sum(p))
        }),
        ("masked_softmax", vec![vec![2, 4], vec![2, 4]], |t, v| {
            let s = t.softmax_rows_masked(v[0], &[true, false, true, true])?;
            let p = t.mul(s, v[1])?;
            Ok(t.sum(p))
        }),
        ("shape_ops", vec![vec![2, 3], vec![3, 3]], |t, v| {
            let c = t.concat_rows(&[v[0], v[1]])?;
            let s = t.slice_rows(c, 1, 3)?;
            let k = t.slice_cols(s, 1, 2)?;
            let cc = t.concat_cols(&[k, s])?;
            let f = t.flatten(cc);
            let r = t.reshape(f, &[5, 3])?;
            let sel = t.select_rows(r, &[4, 0, 4])?;
            let m = t.mask_rows(sel, &[true, false, true])?;
            let q = t.mul(m, m)?;
            let sr = t.sum_rows(q)?;
            Ok(t.sum(sr))
        }),
        ("bce", vec![vec![4, 1]], |t, v| {
            let p = t.sigmoid(v[0]);
            t.bce(p, &[1.0, 0.0, 1.0, 0.0], &[1.0, 2.0, 0.5, 0.0])
        }),
    ];
    for (name, shapes, build) in &cases {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let xs: Vec<Tensor<f64>> = shapes.iter().map(|s| rand_tensor(&mut rng, s)).collect();
            let r = grad_check_many(build, &xs, 1e-4, 1e-4).unwrap();
            assert!(r.passed, "{name} seed {seed}: {r:?}");
        }
    }
}

#[test]
fn gradcheck_composite_softmax_matmul() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = rand_tensor(&mut rng, &[3, 4]);
    let w = rand_tensor(&mut rng, &[4, 4]);
    let r = grad_check(
        |t, v| {
            let wv = t.constant(w.clone());
            let m = t.matmul(v, wv)?;
            let s = t.softmax_rows(m)?;
            let sq = t.mul(s, s)?;
            Ok(t.sum(sq))
        },
        &x,
        1e-4,
        1e-5,
    )
    .unwrap();
    assert!(r.passed, "{r:?}");
}

#[test]
fn gradcheck_detects_wrong_backward_rule() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_tensor(&mut rng, &[2, 3]);
    let r = grad_check(
        |t, v| {
            // sigmoid with a sign-flipped derivative
            let value = t.value(v).clone();
            let data = value
                .data()
                .iter()
                .map(|&z| 1.0 / (1.0 + (-z).exp()))
                .collect();
            let out = Tensor::new(value.shape(), data)?;
            let s = t.custom(
                &[v],
                out,
                Box::new(|_, y, g| {
                    vec![y
                        .data()
                        .iter()
                        .zip(g)
                        .map(|(&y, &g)| -g * y * (1.0 - y))
                        .collect()]
                }),
            );
            Ok(t.sum(s))
        },
        &x,
        1e-4,
        1e-6,
    )
    .unwrap();
    assert!(!r.passed);
    assert!(r.max_rel_error > 1.0);
}

#[test]
fn gradcheck_detects_nondeterminism() {
    use std::cell::Cell;
    let calls = Cell::new(0.0);
    let x = Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap();
    let err = grad_check(
        |t, v| {
            calls.set(calls.get() + 1.0);
            let s = t.sum(v);
            let c = t.constant(Tensor::scalar(calls.get()));
            t.add(s, c)
        },
        &x,
        1e-4,
        1e-6,
    )
    .unwrap_err();
    assert!(matches!(err, infnet::error::Error::NonDeterministic { .. }));
}

#[test]
fn f32_tape_works() {
    let mut tape = Tape::<f32>::new();
    let x = tape.param(Tensor::from_f64(&[1, 2], &[1.0, 2.0]).unwrap());
    let s = tape.softmax_rows(x).unwrap();
    let l = tape.sum(s);
    tape.backward(l).unwrap();
    assert!(tape.grad(x).unwrap().iter().all(|g| g.abs() < 1e-6));
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..5, cols in 1usize..7, seed in any::<u64>(), scale in 0.1f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = rand_tensor(&mut rng, &[rows, cols]);
        x.data_mut().iter_mut().for_each(|v| *v *= scale);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let s = tape.softmax_rows(xv).unwrap();
        let out = tape.value(s);
        for r in 0..rows {
            let row = out.row(r);
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn ops_are_pure(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_tensor(&mut rng, &[3, 4]);
        let b = rand_tensor(&mut rng, &[4, 3]);
        let run = || {
            let mut t = Tape::new();
            let (av, bv) = (t.constant(a.clone()), t.constant(b.clone()));
            let m = t.matmul(av, bv).unwrap();
            let s = t.softmax_rows(m).unwrap();
            t.value(s).data().iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        };
        prop_assert_eq!(run(), run());
    }
}
