use alloc::vec;

use super::suite::*;
use super::*;

#[test]
fn matmul_with_identity_is_identity() {
    let mut tape = Tape::new();
    let i = tape.constant(Tensor::identity(2));
    let a = tape.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let y = tape.matmul(i, a).unwrap();
    assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::matrix(1, 4, vec![0.0; 4]).unwrap());
    let y = tape.softmax(x).unwrap();
    assert_eq!(tape.value(y).data(), &[0.25; 4]);
}

#[test]
fn softmax_survives_large_logits() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::matrix(1, 2, vec![1000.0, 999.0]).unwrap());
    let y = tape.softmax(x).unwrap();
    let p = tape.value(y).data();
    assert!((p[0] - 1.0 / (1.0 + libm::exp(-1.0))).abs() < 1e-12);
}

#[test]
fn unit_kernel_convolution_is_identity() {
    let img = rand_tensor(&[2, 1, 5, 4], 3, -1.0, 1.0);
    for pad in [Padding::Same, Padding::Valid] {
        let mut tape = Tape::new();
        let x = tape.constant(img.clone());
        let w = tape.constant(Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap());
        let y = tape.conv2d(x, w, pad).unwrap();
        assert_eq!(tape.value(y), &img);
    }
}

#[test]
fn square_sum_gradient() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![3.0]), true);
    let sq = tape.mul(x, x).unwrap();
    let loss = tape.sum(sq).unwrap();
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.wrt(&tape, x).data(), &[6.0]);
}

#[test]
fn constant_loss_has_zero_gradients() {
    let mut tape = Tape::new();
    let x = tape.leaf(rand_tensor(&[3, 2], 1, -1.0, 1.0), true);
    let s = tape.sum(x).unwrap();
    let loss = tape.sub(s, s).unwrap();
    let g = tape.backward(loss).unwrap();
    assert!(g.wrt(&tape, x).data().iter().all(|&v| v == 0.0));
}

#[test]
fn backward_rejects_non_scalar_and_detached_losses() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]), true);
    let y = tape.scale(x, 2.0).unwrap();
    assert!(matches!(tape.backward(y), Err(CoreError::NonScalarLoss { .. })));
    let c = tape.constant(Tensor::scalar(1.0));
    assert!(matches!(tape.backward(c), Err(CoreError::DetachedLoss)));
}

#[test]
fn shape_errors_name_the_op() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    match tape.matmul(a, b) {
        Err(CoreError::ShapeMismatch { op, lhs, rhs }) => {
            assert_eq!(op, "matmul");
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("unexpected {other:?}"),
    }
    let c = tape.constant(Tensor::zeros(&[3]));
    assert!(matches!(tape.add(a, c), Err(CoreError::ShapeMismatch { op: "add", .. })));
}

#[test]
fn overflow_is_reported() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::vector(vec![1000.0]));
    assert!(matches!(tape.exp(x), Err(CoreError::NonFinite { op: "exp" })));
}

#[test]
fn ln_clamps_small_arguments() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::vector(vec![0.0, -1.0]));
    let y = tape.ln(x).unwrap();
    let expect = libm::log(CLAMP_EPS);
    assert!(tape.value(y).data().iter().all(|&v| v == expect));
}

#[test]
fn relu_subgradient_at_zero_is_zero() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![0.0, 1.0]), true);
    let y = tape.relu(x).unwrap();
    let s = tape.sum(y).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.wrt(&tape, x).data(), &[0.0, 1.0]);
}

#[test]
fn cross_entropy_gradient_at_uniform_prediction() {
    // logits all zero: softmax is uniform, so d(sum ce)/dz = softmax - onehot
    let logits = Tensor::matrix(3, 4, vec![0.0; 12]).unwrap();
    let labels = [1usize, 3, 0];
    let mut onehot = Tensor::zeros(&[3, 4]);
    for (i, &l) in labels.iter().enumerate() {
        onehot.data_mut()[i * 4 + l] = 1.0;
    }
    let oh = onehot.clone();
    let ce = move |t: &mut Tape, z: Var| {
        let lp = t.log_softmax(z)?;
        let y = t.constant(oh.clone());
        let m = t.mul(lp, y)?;
        let s = t.sum(m)?;
        t.scale(s, -1.0)
    };
    let mut tape = Tape::new();
    let z = tape.leaf(logits.clone(), true);
    let loss = ce(&mut tape, z).unwrap();
    let g = tape.backward(loss).unwrap().wrt(&tape, z);
    for (gi, yi) in g.data().iter().zip(onehot.data()) {
        assert!((gi - (0.25 - yi)).abs() < 1e-12);
    }
    // central differences with step 1e-5
    assert!(grad_check(ce, &logits, 1e-5).unwrap() < 1e-8);
}

#[test]
fn linear_function_gradcheck_is_exact() {
    let w = rand_tensor(&[6], 9, -2.0, 2.0);
    let wc = w.clone();
    let f = move |t: &mut Tape, x: Var| {
        let w = t.constant(wc.clone());
        let m = t.mul(w, x)?;
        t.sum(m)
    };
    let err = grad_check(f, &rand_tensor(&[6], 10, -1.0, 1.0), 1e-5).unwrap();
    assert!(err <= 1e-9, "err {err}");
}

#[test]
fn relu_gradcheck_away_from_kink() {
    let f = |t: &mut Tape, x: Var| {
        let r = t.relu(x)?;
        let s = t.mul(r, r)?;
        t.sum(s)
    };
    let err = grad_check(f, &rand_away_from_zero(&[10], 4, 0.05), 1e-5).unwrap();
    assert!(err <= 1e-6, "err {err}");
}

#[test]
fn grad_check_rejects_non_scalar_output() {
    let f = |t: &mut Tape, x: Var| t.scale(x, 2.0);
    assert!(matches!(
        grad_check(f, &Tensor::vector(vec![1.0, 2.0]), 1e-5),
        Err(CoreError::NonScalarLoss { .. })
    ));
}

#[test]
fn every_op_matches_finite_differences() {
    for (name, point, f) in op_suite() {
        let err = grad_check(&f, &point, 1e-5).unwrap();
        assert!(err <= 1e-4, "{name}: relative error {err}");
    }
}

#[test]
fn forward_is_bit_reproducible() {
    for (name, point, f) in op_suite() {
        let run = || {
            let mut t = Tape::new();
            let x = t.leaf(point.clone(), true);
            let y = f(&mut t, x).unwrap();
            let g = t.backward(y).unwrap().wrt(&t, x);
            (t.value(y).clone(), g)
        };
        assert_eq!(run(), run(), "{name}");
    }
}

#[test]
fn backward_is_linear_over_independent_subgraphs() {
    let suite = op_suite();
    let (_, pa, fa) = &suite[6];
    let (_, pb, fb) = &suite[14];
    let single = |f: &Graph, p: &Tensor| {
        let mut t = Tape::new();
        let x = t.leaf(p.clone(), true);
        let y = f(&mut t, x).unwrap();
        t.backward(y).unwrap().wrt(&t, x)
    };
    let ga = single(fa, pa);
    let gb = single(fb, pb);
    let mut t = Tape::new();
    let xa = t.leaf(pa.clone(), true);
    let xb = t.leaf(pb.clone(), true);
    let ya = fa(&mut t, xa).unwrap();
    let yb = fb(&mut t, xb).unwrap();
    let y = t.add(ya, yb).unwrap();
    let g = t.backward(y).unwrap();
    assert_eq!(g.wrt(&t, xa), ga);
    assert_eq!(g.wrt(&t, xb), gb);
}

#[test]
fn batch_norm_needs_two_samples() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::zeros(&[1, 3]));
    assert!(t.batch_norm(x, 1e-5).is_err());
}
