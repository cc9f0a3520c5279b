mod common;

use causal_cxr::numcore::{adam_step, AdamConfig, OptimizerState, Tape, Tensor};
use causal_cxr::Error;
use common::{max_abs_diff, naive_matmul, random_tensor, rng};
use proptest::prelude::*;

fn rows(r: &[Vec<f64>]) -> Tensor {
    Tensor::from_rows(r).unwrap()
}

#[test]
fn tensor_rejects_mismatched_data() {
    assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    assert_eq!(Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap().numel(), 6);
}

#[test]
fn matmul_identity_and_hand_examples() {
    let mut t = Tape::new();
    let i2 = t.constant(Tensor::eye(2));
    let b = t.constant(rows(&[vec![3.0, 4.0], vec![5.0, 6.0]]));
    let y = t.matmul(i2, b).unwrap();
    assert_eq!(t.value(y).data(), &[3.0, 4.0, 5.0, 6.0]);

    let a = t.constant(rows(&[vec![1.0, 2.0]]));
    let c = t.constant(rows(&[vec![3.0], vec![4.0]]));
    let y = t.matmul(a, c).unwrap();
    assert_eq!(t.value(y).shape(), &[1, 1]);
    assert_eq!(t.value(y).data(), &[11.0]);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut r = rng(1);
    for _ in 0..10 {
        let a = random_tensor(&mut r, &[3, 4]);
        let b = random_tensor(&mut r, &[4, 2]);
        let want = naive_matmul(a.data(), b.data(), 3, 4, 2);
        let mut t = Tape::new();
        let (va, vb) = (t.constant(a), t.constant(b));
        let y = t.matmul(va, vb).unwrap();
        assert!(max_abs_diff(t.value(y).data(), &want) <= 1e-12);
    }
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::zeros(&[2, 3]));
    let b = t.constant(Tensor::zeros(&[2, 3]));
    let err = t.matmul(a, b).unwrap_err();
    match &err {
        Error::Dimension { lhs, rhs, .. } => {
            assert_eq!(lhs, &[2, 3]);
            assert_eq!(rhs, &[2, 3]);
        }
        other => panic!("unexpected {other:?}"),
    }
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]"), "{msg}");
}

#[test]
fn softmax_examples() {
    let mut t = Tape::new();
    let x = t.constant(rows(&[vec![0.0, 0.0], vec![1f64.ln(), 3f64.ln()]]));
    let y = t.softmax_rows(x, 1.0).unwrap();
    let d = t.value(y).data();
    assert!(max_abs_diff(d, &[0.5, 0.5, 0.25, 0.75]) < 1e-15);
}

#[test]
fn softmax_rejects_non_finite_and_bad_scale() {
    let mut t = Tape::new();
    let x = t.constant(rows(&[vec![0.0, f64::NAN]]));
    assert!(matches!(t.softmax_rows(x, 1.0), Err(Error::Numeric(_))));
    let x = t.constant(rows(&[vec![0.0, 1.0]]));
    assert!(t.softmax_rows(x, 0.0).is_err());
}

#[test]
fn softmax_random_rows_sum_to_one() {
    let mut r = rng(2);
    let x = random_tensor(&mut r, &[4, 6]);
    let mut t = Tape::new();
    let v = t.constant(x);
    let y = t.softmax_rows(v, 1.0).unwrap();
    for row in t.value(y).data().chunks(6) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(
        data in prop::collection::vec(-50.0f64..50.0, 1..40),
        cols in 1usize..8,
        scale in 0.1f64..10.0,
    ) {
        let n = data.len() / cols * cols;
        prop_assume!(n > 0);
        let x = Tensor::new(vec![n / cols, cols], data[..n].to_vec()).unwrap();
        let mut t = Tape::new();
        let v = t.constant(x);
        let y = t.softmax_rows(v, scale).unwrap();
        for row in t.value(y).data().chunks(cols) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(row.iter().all(|p| (0.0..=1.0).contains(p)));
        }
    }

    #[test]
    fn tied_logits_get_equal_weight(v in -20.0f64..20.0, n in 1usize..9) {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![v; n]));
        let y = t.softmax_rows(x, 1.0).unwrap();
        let d = t.value(y).data();
        prop_assert!(d.iter().all(|&p| p == d[0]));
    }
}

#[test]
fn conv_scaling_example() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::filled(&[1, 3, 3], 1.0));
    let k = t.constant(Tensor::filled(&[1, 1, 1, 1], 2.0));
    let y = t.conv2d(x, k, 1, 0).unwrap();
    assert_eq!(t.value(y).shape(), &[1, 3, 3]);
    assert!(t.value(y).data().iter().all(|&v| v == 2.0));
}

#[test]
fn conv_averaging_matches_sliding_window() {
    let mut r = rng(3);
    let x = random_tensor(&mut r, &[1, 4, 4]);
    let mut t = Tape::new();
    let vx = t.constant(x.clone());
    let k = t.constant(Tensor::filled(&[1, 1, 3, 3], 1.0 / 9.0));
    let y = t.conv2d(vx, k, 1, 0).unwrap();
    assert_eq!(t.value(y).shape(), &[1, 2, 2]);
    let d = x.data();
    for i in 0..2 {
        for j in 0..2 {
            let mut s = 0.0;
            for a in 0..3 {
                for b in 0..3 {
                    s += d[(i + a) * 4 + j + b];
                }
            }
            assert!((t.value(y).data()[i * 2 + j] - s / 9.0).abs() < 1e-12);
        }
    }
}

#[test]
fn conv_matches_direct_loops_with_stride_and_padding() {
    let mut r = rng(4);
    let (ci, co, h, w, k, s, p) = (2, 3, 6, 8, 4, 2, 1);
    let x = random_tensor(&mut r, &[ci, h, w]);
    let kern = random_tensor(&mut r, &[co, ci, k, k]);
    let mut t = Tape::new();
    let (vx, vk) = (t.constant(x.clone()), t.constant(kern.clone()));
    let y = t.conv2d(vx, vk, s, p).unwrap();
    let (ho, wo) = ((h + 2 * p - k) / s + 1, (w + 2 * p - k) / s + 1);
    assert_eq!(t.value(y).shape(), &[co, ho, wo]);
    for o in 0..co {
        for i in 0..ho {
            for j in 0..wo {
                let mut acc = 0.0;
                for c in 0..ci {
                    for a in 0..k {
                        for b in 0..k {
                            let (yy, xx) = ((i * s + a) as isize - p as isize, (j * s + b) as isize - p as isize);
                            if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                                acc += kern.data()[((o * ci + c) * k + a) * k + b]
                                    * x.data()[(c * h + yy as usize) * w + xx as usize];
                            }
                        }
                    }
                }
                assert!((t.value(y).data()[(o * ho + i) * wo + j] - acc).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn conv_geometry_error_lists_output_size() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::zeros(&[1, 5, 5]));
    let k = t.constant(Tensor::zeros(&[1, 1, 2, 2]));
    let err = t.conv2d(x, k, 2, 0).unwrap_err();
    assert!(matches!(err, Error::Geometry { .. }));
    assert!(err.to_string().contains("2.50"), "{err}");
}

#[test]
fn global_average_pool_examples() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::filled(&[3, 2, 5], 7.0));
    let y = t.global_average_pool(x).unwrap();
    assert!(t.value(y).data().iter().all(|&v| (v - 7.0).abs() < 1e-15));
    let x = t.constant(Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let y = t.global_average_pool(x).unwrap();
    assert_eq!(t.value(y).data(), &[2.5]);
    let x = t.constant(Tensor::zeros(&[2, 2]));
    assert!(matches!(t.global_average_pool(x), Err(Error::Shape { .. })));

    let mut r = rng(5);
    let x = random_tensor(&mut r, &[4, 3, 5]);
    let want: Vec<f64> = x.data().chunks(15).map(|c| c.iter().sum::<f64>() / 15.0).collect();
    let v = t.constant(x);
    let y = t.global_average_pool(v).unwrap();
    assert!(max_abs_diff(t.value(y).data(), &want) < 1e-15);
}

#[test]
fn backward_examples() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::scalar(3.0), true);
    let y = t.mul(x, x).unwrap();
    t.backward(y).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[6.0]);

    let mut r = rng(6);
    let mut t = Tape::new();
    let x = t.leaf(random_tensor(&mut r, &[3, 4]), true);
    let s = t.softmax_rows(x, 1.0).unwrap();
    let l = t.sum(s);
    t.backward(l).unwrap();
    assert!(t.grad(x).unwrap().iter().all(|g| g.abs() < 1e-15));
}

#[test]
fn backward_needs_a_scalar() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::vector(vec![1.0, 2.0]), true);
    let y = t.sigmoid(x);
    assert!(matches!(t.backward(y), Err(Error::Contract(_))));
}

#[test]
fn fan_out_equals_sum_over_duplicated_graph() {
    let mut r = rng(7);
    let x0 = random_tensor(&mut r, &[3, 3]);
    // f(x) = sum(sigmoid(x) ⊙ (x·x)); x feeds three uses.
    let build = |t: &mut Tape, a: causal_cxr::numcore::Var, b: causal_cxr::numcore::Var, c: causal_cxr::numcore::Var| {
        let s = t.sigmoid(a);
        let m = t.matmul(b, c).unwrap();
        let p = t.mul(s, m).unwrap();
        t.sum(p)
    };
    let mut shared = Tape::new();
    let x = shared.leaf(x0.clone(), true);
    let l = build(&mut shared, x, x, x);
    shared.backward(l).unwrap();

    let mut split = Tape::new();
    let a = split.leaf(x0.clone(), true);
    let b = split.leaf(x0.clone(), true);
    let c = split.leaf(x0, true);
    let l2 = build(&mut split, a, b, c);
    split.backward(l2).unwrap();
    assert_eq!(shared.value(l).data(), split.value(l2).data());
    let summed: Vec<f64> = (0..9)
        .map(|i| split.grad(a).unwrap()[i] + split.grad(b).unwrap()[i] + split.grad(c).unwrap()[i])
        .collect();
    assert!(max_abs_diff(shared.grad(x).unwrap(), &summed) < 1e-14);
}

#[test]
fn forward_and_backward_are_bit_deterministic() {
    let run = || {
        let mut r = rng(8);
        let mut t = Tape::new();
        let x = t.leaf(random_tensor(&mut r, &[2, 6, 6]), true);
        let k = t.leaf(random_tensor(&mut r, &[3, 2, 4, 4]), true);
        let y = t.conv2d(x, k, 2, 1).unwrap();
        let y = t.relu(y);
        let g = t.global_average_pool(y).unwrap();
        let l = t.softplus(g);
        let l = t.sum(l);
        t.backward(l).unwrap();
        (t.value(l).data().to_vec(), t.grad(k).unwrap().to_vec(), t.grad(x).unwrap().to_vec())
    };
    assert_eq!(run(), run());
}

#[test]
fn adam_zero_gradient_without_decay_is_a_fixed_point() {
    let mut r = rng(9);
    let p0 = vec![random_tensor(&mut r, &[3, 2]), random_tensor(&mut r, &[4])];
    let mut params = p0.clone();
    let cfg = AdamConfig { weight_decay: 0.0, ..Default::default() };
    let mut state = OptimizerState::new(&params, cfg);
    let grads: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
    for step in 1..=3 {
        adam_step(&mut params, &grads, &mut state).unwrap();
        assert_eq!(state.step_count, step);
    }
    assert_eq!(params, p0);
}

#[test]
fn adam_single_scalar_step_from_known_moments() {
    let cfg = AdamConfig::default();
    assert_eq!(cfg.learning_rate, 1e-3);
    assert_eq!(cfg.weight_decay, 1e-2);
    let mut params = vec![Tensor::scalar(0.5)];
    let mut state = OptimizerState::new(&params, cfg);
    state.step_count = 4;
    state.first_moment = vec![Tensor::scalar(0.2)];
    state.second_moment = vec![Tensor::scalar(0.03)];
    adam_step(&mut params, &[Tensor::scalar(-0.4)], &mut state).unwrap();
    // Hand-evaluated fifth step.
    let m = 0.9 * 0.2 + 0.1 * -0.4;
    let v = 0.999 * 0.03 + 0.001 * 0.16;
    let m_hat = m / (1.0 - 0.9f64.powi(5));
    let v_hat = v / (1.0 - 0.999f64.powi(5));
    let decayed = 0.5 - 1e-3 * 1e-2 * 0.5;
    let want = decayed - 1e-3 * m_hat / (v_hat.sqrt() + 1e-8);
    assert!((params[0].data()[0] - want).abs() < 1e-15);
    assert!((state.first_moment[0].data()[0] - m).abs() < 1e-15);
    assert!((state.second_moment[0].data()[0] - v).abs() < 1e-15);
    assert_eq!(state.step_count, 5);
}

#[test]
fn adam_rejects_mismatched_shapes() {
    let mut params = vec![Tensor::zeros(&[2, 2])];
    let mut state = OptimizerState::new(&params, AdamConfig::default());
    let err = adam_step(&mut params, &[Tensor::zeros(&[4])], &mut state).unwrap_err();
    assert!(matches!(err, Error::Dimension { .. }));
    assert_eq!(state.step_count, 0);
}

#[test]
fn adam_moments_keep_parameter_shapes() {
    let mut r = rng(10);
    let mut params = vec![random_tensor(&mut r, &[2, 3, 4])];
    let mut state = OptimizerState::new(&params, AdamConfig::default());
    let g = vec![random_tensor(&mut r, &[2, 3, 4])];
    adam_step(&mut params, &g, &mut state).unwrap();
    assert_eq!(state.first_moment[0].shape(), params[0].shape());
    assert_eq!(state.second_moment[0].shape(), params[0].shape());
}
