use rand::Rng;
use unitbridge::numerics::{eval_graph, finite_diff_check, Array, NumericsError, Tape};
use unitbridge::gradcheck::kernel_suite;
use unitbridge::rng::rng_from;

fn rand_array(rng: &mut impl Rng, r: usize, c: usize) -> Array<f64> {
    Array::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
}

#[test]
fn every_kernel_passes_finite_differences_on_random_shapes() {
    let report = kernel_suite(2024, 20).unwrap();
    assert_eq!(report.rows.len(), 16);
    assert!(report.passed(), "{:?}", report.rows);
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let out = eval_graph(&[("x", Array::<f64>::zeros(1, 3))], |t, v| t.softmax_rows(v[0])).unwrap();
    for &p in out.data() {
        assert!((p - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = rng_from(&[9]);
    let x = Array::from_fn(7, 11, |_, _| rng.random_range(-20.0..20.0));
    let out = eval_graph(&[("x", x)], |t, v| t.softmax_rows(v[0])).unwrap();
    for r in 0..7 {
        assert!((out.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn layer_norm_standardizes() {
    let x = Array::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
    let out = eval_graph(&[("x", x)], |t, v| t.layer_norm_rows(v[0], 1e-12)).unwrap();
    let mean: f64 = out.data().iter().sum::<f64>() / 3.0;
    let var: f64 = out.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 3.0;
    assert!(mean.abs() < 1e-12);
    assert!((var - 1.0).abs() < 1e-9);
}

#[test]
fn matmul_matches_naive_loop() {
    let mut rng = rng_from(&[11]);
    let a = rand_array(&mut rng, 2, 3);
    let b = rand_array(&mut rng, 3, 4);
    let out = eval_graph(&[("a", a.clone()), ("b", b.clone())], |t, v| t.matmul(v[0], v[1])).unwrap();
    for i in 0..2 {
        for j in 0..4 {
            let mut s = 0.0;
            for k in 0..3 {
                s += a.get(i, k) * b.get(k, j);
            }
            assert!((out.get(i, j) - s).abs() < 1e-12);
        }
    }
}

#[test]
fn square_and_constant_gradients() {
    let mut tape = Tape::new();
    let x = tape.param(Array::scalar(3.0));
    let y = tape.mul(x, x).unwrap();
    assert_eq!(tape.backward(y).unwrap().get(x).item(), 6.0);

    let mut tape = Tape::new();
    let x = tape.param(Array::scalar(3.0));
    let c = tape.constant(Array::scalar(5.0));
    let unrelated = tape.scale(x, 2.0).unwrap();
    let grads = tape.backward(c).unwrap();
    assert_eq!(grads.get(x).item(), 0.0);
    assert_eq!(grads.get(unrelated).item(), 0.0);
}

#[test]
fn softmax_xent_gradient_is_p_minus_onehot() {
    let mut rng = rng_from(&[13]);
    let logits = rand_array(&mut rng, 1, 5);
    let mut tape = Tape::new();
    let x = tape.param(logits.clone());
    let loss = tape.masked_xent(x, &[2], &[true]).unwrap();
    let g = tape.backward(loss).unwrap().get(x);
    let m = logits.data().iter().copied().fold(f64::MIN, f64::max);
    let z: f64 = logits.data().iter().map(|v| (v - m).exp()).sum();
    for k in 0..5 {
        let p = (logits.data()[k] - m).exp() / z;
        let expect = p - if k == 2 { 1.0 } else { 0.0 };
        assert!((g.data()[k] - expect).abs() < 1e-10);
    }
}

#[test]
fn backward_rejects_non_scalar_output() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Array::zeros(2, 2));
    assert!(matches!(tape.backward(x), Err(NumericsError::NonScalarOutput(_))));
}

#[test]
fn shape_errors_name_the_kernel() {
    let err = eval_graph(&[("a", Array::<f64>::zeros(2, 3)), ("b", Array::zeros(2, 3))], |t, v| t.matmul(v[0], v[1]))
        .unwrap_err();
    match err {
        NumericsError::ShapeMismatch { kernel, shapes } => {
            assert_eq!(kernel, "matmul");
            assert_eq!(shapes, vec![vec![2, 3], vec![2, 3]]);
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn quadratic_form_check_is_tight() {
    let mut rng = rng_from(&[17]);
    let a = rand_array(&mut rng, 4, 4);
    let x = rand_array(&mut rng, 4, 1);
    let report = finite_diff_check(
        |t, v| {
            let ax = t.matmul(v[0], v[1])?;
            let xax = t.matmul_t(v[1], ax, true, false)?;
            t.sum(xax)
        },
        &[("A", a), ("x", x)],
        1e-5,
    )
    .unwrap();
    assert!(report.max_error() < 1e-8, "{:?}", report.per_input);
}

#[test]
fn finite_diff_rejects_bad_step() {
    let r = finite_diff_check(|t, v| t.sum(v[0]), &[("x", Array::zeros(1, 1))], 1e-2);
    assert!(matches!(r, Err(NumericsError::InvalidStep(_))));
}

#[test]
fn evaluation_is_bitwise_deterministic() {
    let mut rng = rng_from(&[19]);
    let a = rand_array(&mut rng, 8, 6);
    let b = rand_array(&mut rng, 6, 5);
    let run = || {
        eval_graph(&[("a", a.clone()), ("b", b.clone())], |t, v| {
            let y = t.matmul(v[0], v[1])?;
            let y = t.gelu(y)?;
            t.softmax_rows(y)
        })
        .unwrap()
    };
    assert_eq!(run().data(), run().data());
}
