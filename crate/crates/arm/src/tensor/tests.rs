use super::*;
use crate::rng::seed_rng;

fn assert_close(a: f64, b: f64, tol: f64) {
    assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
}

#[test]
fn matmul_identity() {
    let mut g = Graph::new();
    let a = g.leaf(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
    let i = g.leaf(Tensor::eye(2));
    let y = g.matmul(a, i).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn softmax_symmetry() {
    let mut g = Graph::new();
    let a = g.leaf(Tensor::row(&[0.0, 0.0]));
    let y = g.softmax(a).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, 0.5]);
}

#[test]
fn conv1d_identity_kernel() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::col(&[1.0, 2.0, 3.0, 4.0]));
    let k = g.leaf(Tensor::col(&[1.0]));
    let b = g.leaf(Tensor::zeros(1, 1));
    let y = g.conv1d(x, k, b).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn conv1d_moving_average_hand_oracle() {
    // Same-padded size-3 moving average of [1,2,3,4]:
    // [ (0+1+2)/3, (1+2+3)/3, (2+3+4)/3, (3+4+0)/3 ]
    let mut g = Graph::new();
    let x = g.leaf(Tensor::col(&[1.0, 2.0, 3.0, 4.0]));
    let third = 1.0 / 3.0;
    let k = g.leaf(Tensor::col(&[third, third, third]));
    let b = g.leaf(Tensor::zeros(1, 1));
    let y = g.conv1d(x, k, b).unwrap();
    let expected = [1.0, 2.0, 3.0, 7.0 / 3.0];
    for (got, want) in g.value(y).data().iter().zip(expected) {
        assert_close(*got, want, 1e-12);
    }
}

#[test]
fn grad_of_sum_is_ones() {
    let mut g = Graph::new();
    let x = g.param(Tensor::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0]]).unwrap());
    let s = g.sum_all(x).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0, 1.0]);
}

#[test]
fn grad_of_square_at_three() {
    let mut g = Graph::new();
    let x = g.param(Tensor::scalar(3.0));
    let y = g.mul(x, x).unwrap();
    g.backward(y).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[6.0]);
}

#[test]
fn conv1d_kernel_grad_matches_finite_differences_tightly() {
    // Frozen 5-point input; kernel gradient against central differences at
    // step 1e-5 must agree to 1e-6 relative error.
    let x = Tensor::col(&[0.3, -1.2, 0.8, 2.0, -0.5]);
    let point = vec![
        ("k".to_string(), Tensor::col(&[0.4, -0.7, 0.2])),
        ("b".to_string(), Tensor::row(&[0.1])),
    ];
    let report = check_scalar_fn("conv1d-kernel", &point, 1e-6, 1e-5, |g, ids| {
        let xn = g.leaf(x.clone());
        let y = g.conv1d(xn, ids[0], ids[1])?;
        let y2 = g.mul(y, y)?;
        g.sum_all(y2)
    })
    .unwrap();
    assert!(report.pass(), "{}", report.summary());
}

#[test]
fn layer_norm_and_softmax_gradcheck() {
    for op in ["layer_norm", "softmax"] {
        let report = check_named_op(op, 11, 1e-4).unwrap();
        assert!(report.pass(), "{}", report.summary());
    }
}

#[test]
fn every_primitive_passes_gradcheck_at_100_random_points() {
    for op in named_ops() {
        let mut worst = 0.0f64;
        for seed in 0..100 {
            let report = check_named_op(op, seed, 1e-4).unwrap();
            assert!(report.pass(), "{}", report.summary());
            worst = worst.max(report.max_rel_err);
        }
        assert!(worst <= 1e-4, "{op}: worst rel err {worst:.3e}");
    }
}

#[test]
fn non_smooth_point_is_flagged_skipped() {
    // relu has a kink at 0; checking exactly there must be reported as
    // skipped, not as a gradient failure.
    let point = vec![("x".to_string(), Tensor::row(&[0.0, 1.0, -1.0]))];
    let report = check_scalar_fn("relu-at-kink", &point, 1e-4, 1e-5, |g, ids| {
        let y = g.relu(ids[0])?;
        g.sum_all(y)
    })
    .unwrap();
    assert_eq!(report.skipped.len(), 1);
    assert!(report.skipped[0].contains("non-smooth"), "{:?}", report.skipped);
    assert!(report.pass(), "{}", report.summary());
}

#[test]
fn forward_is_deterministic_given_seed() {
    let run = || {
        let mut rng = seed_rng(42);
        let mut g = Graph::new();
        let x = g.leaf(Tensor::normal(6, 5, 1.0, &mut rng));
        let w = g.leaf(Tensor::normal(5, 4, 1.0, &mut rng));
        let h = g.matmul(x, w).unwrap();
        let h = g.gelu(h).unwrap();
        let h = g.dropout(h, 0.3, true, &mut rng).unwrap();
        let s = g.sum_all(h).unwrap();
        g.value(s).data()[0]
    };
    let a = run();
    let b = run();
    assert_eq!(a.to_bits(), b.to_bits());
}

#[test]
fn dropout_rate_zero_is_identity() {
    let mut rng = seed_rng(3);
    let x = Tensor::normal(8, 3, 1.0, &mut rng);
    let mut g = Graph::new();
    let xn = g.leaf(x.clone());
    let y = g.dropout(xn, 0.0, true, &mut rng).unwrap();
    assert_eq!(g.value(y).data(), x.data());
}

#[test]
fn dropout_preserves_expectation() {
    // Mean over 10k trials of dropped-and-rescaled constant input stays
    // within 2% of the constant.
    let mut rng = seed_rng(7);
    let c = 1.7;
    let trials = 10_000;
    let mut sum = 0.0;
    let mut count = 0.0;
    for _ in 0..trials {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full(1, 16, c));
        let y = g.dropout(x, 0.4, true, &mut rng).unwrap();
        sum += g.value(y).data().iter().sum::<f64>();
        count += 16.0;
    }
    let mean = sum / count;
    assert!((mean - c).abs() / c < 0.02, "mean {mean} vs {c}");
}

#[test]
fn shape_mismatch_names_op_and_shapes() {
    let mut g = Graph::new();
    let a = g.leaf(Tensor::zeros(2, 3));
    let b = g.leaf(Tensor::zeros(3, 3));
    let err = g.add(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("add") && msg.contains("(2, 3)") && msg.contains("(3, 3)"), "{msg}");
}

#[test]
fn non_finite_output_names_op() {
    let mut g = Graph::new();
    let a = g.leaf(Tensor::row(&[-1.0]));
    let err = g.log(a).unwrap_err();
    assert!(err.to_string().contains("log"), "{err}");
}

#[test]
fn backward_is_idempotent_with_zero_grads() {
    let mut g = Graph::new();
    let x = g.param(Tensor::row(&[2.0, -1.0]));
    let y = g.mul(x, x).unwrap();
    let s = g.sum_all(y).unwrap();
    g.backward(s).unwrap();
    let first = g.grad(x).unwrap().to_vec();
    g.zero_grads();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), first.as_slice());
}

#[test]
fn fan_out_gradients_accumulate() {
    // y = x + x  =>  dy/dx = 2.
    let mut g = Graph::new();
    let x = g.param(Tensor::scalar(5.0));
    let y = g.add(x, x).unwrap();
    g.backward(y).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[2.0]);
}

#[test]
fn backward_seed_shape_is_validated() {
    let mut g = Graph::new();
    let x = g.param(Tensor::zeros(2, 2));
    let y = g.mul(x, x).unwrap();
    assert!(g.backward_seeded(y, Tensor::zeros(1, 4)).is_err());
    assert!(g.backward(y).is_err()); // implicit seed needs 1x1
}

#[test]
fn slice_concat_round_trip_preserves_bits() {
    let mut rng = seed_rng(5);
    for _ in 0..20 {
        let t = Tensor::normal(7, 4, 3.0, &mut rng);
        let mut g = Graph::new();
        let x = g.leaf(t.clone());
        let top = g.slice_rows(x, 0, 3).unwrap();
        let bottom = g.slice_rows(x, 3, 7).unwrap();
        let back = g.concat_rows(top, bottom).unwrap();
        assert_eq!(g.value(back).data(), t.data());

        let left = g.slice_cols(x, 0, 2).unwrap();
        let right = g.slice_cols(x, 2, 4).unwrap();
        let back = g.concat_cols(left, right).unwrap();
        assert_eq!(g.value(back).data(), t.data());
    }
}
