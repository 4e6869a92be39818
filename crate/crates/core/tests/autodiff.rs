use dudgan_core::autodiff::gradcheck::max_gradient_error;
use dudgan_core::autodiff::{concat, Tape, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-5;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

/// Values kept away from the kink at zero.
fn kinkless_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    random_tensor(rng, shape).map(|v| if v.abs() < 0.05 { v.signum() * 0.05 + v } else { v })
}

fn random_shape(rng: &mut ChaCha8Rng) -> Vec<usize> {
    vec![rng.random_range(1..5), rng.random_range(1..5)]
}

/// Scalarizes `out` against fixed random weights so every output element
/// contributes a distinct gradient.
fn project<'t>(tape: &'t Tape, out: Var<'t>, seed: u64) -> Result<Var<'t>, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random_tensor(&mut rng, &out.shape());
    out.mul(tape.constant(w)).map(Var::sum)
}

fn check_unary<G, F>(name: &str, gen: G, f: F)
where
    G: Fn(&mut ChaCha8Rng, &[usize]) -> Tensor,
    F: for<'t> Fn(Var<'t>) -> Result<Var<'t>, TensorError>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..100 {
        let shape = random_shape(&mut rng);
        let x = gen(&mut rng, &shape);
        let err = max_gradient_error(&[x], |tape, v| project(tape, f(v[0])?, case)).unwrap();
        assert!(err <= TOL, "{name} case {case}: rel err {err:e}");
    }
}

#[test]
fn elementwise_unary_gradients() {
    check_unary("relu", kinkless_tensor, |x| Ok(x.relu()));
    check_unary("leaky_relu", kinkless_tensor, |x| Ok(x.leaky_relu(0.2)));
    check_unary("tanh", random_tensor, |x| Ok(x.tanh()));
    check_unary("exp", random_tensor, |x| Ok(x.exp()));
    check_unary("softplus", random_tensor, |x| Ok(x.softplus()));
    check_unary("scale", random_tensor, |x| Ok(x.scale(-1.7)));
    check_unary("log", |r, s| random_tensor(r, s).map(|v| v.abs() + 0.2), |x| x.log());
    check_unary("l2_normalize", random_tensor, |x| x.l2_normalize(1));
    check_unary("l2_normalize axis0", random_tensor, |x| x.l2_normalize(0));
    check_unary("log_softmax", random_tensor, |x| x.log_softmax());
    check_unary("transpose", random_tensor, |x| x.transpose());
    check_unary("sum_axis0", random_tensor, |x| x.sum_axis(0));
    check_unary("sum_axis1", random_tensor, |x| x.sum_axis(1));
    check_unary("mean", random_tensor, |x| x.mean());
    check_unary("sum", random_tensor, |x| Ok(x.sum()));
    check_unary("slice", random_tensor, |x| {
        let cols = x.shape()[1];
        x.slice(1, cols / 2, cols)
    });
    check_unary("broadcast", random_tensor, |x| {
        let s = x.shape();
        x.slice(0, 0, 1)?.broadcast_to(&[3, s[1]])
    });
}

#[test]
fn binary_and_broadcast_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for case in 0..100 {
        let shape = random_shape(&mut rng);
        let a = random_tensor(&mut rng, &shape);
        let b = random_tensor(&mut rng, &shape);
        let row = random_tensor(&mut rng, &[shape[1]]);
        let col = random_tensor(&mut rng, &[shape[0], 1]);
        let inputs = [a, b, row, col];
        let err = max_gradient_error(&inputs, |tape, v| {
            let s = v[0].add(v[1])?;
            let d = v[0].sub(v[2])?;
            let p = v[1].mul(v[3])?.mul(v[2])?;
            let out = s.mul(d)?.add(p)?;
            project(tape, out, case)
        })
        .unwrap();
        assert!(err <= TOL, "binary case {case}: rel err {err:e}");
    }
}

#[test]
fn matmul_and_concat_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for case in 0..100 {
        let (m, k, n) = (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..5));
        let a = random_tensor(&mut rng, &[m, k]);
        let b = random_tensor(&mut rng, &[k, n]);
        let c = random_tensor(&mut rng, &[m, 2]);
        let err = max_gradient_error(&[a, b, c], |tape, v| {
            let prod = v[0].matmul(v[1])?;
            let joined = concat(&[prod, v[2]], 1)?;
            let stacked = concat(&[joined, joined.tanh()], 0)?;
            project(tape, stacked, case)
        })
        .unwrap();
        assert!(err <= TOL, "matmul case {case}: rel err {err:e}");
    }
}

#[test]
fn matmul_identity() {
    let tape = Tape::new();
    let a = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
    let i = tape.constant(Tensor::eye(2));
    assert_eq!(a.matmul(i).unwrap().value().data(), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn softplus_at_zero_is_ln2() {
    let tape = Tape::new();
    let y = tape.constant(Tensor::scalar(0.0)).softplus();
    assert!((y.item() - 0.6931).abs() < 1e-4);
    assert_eq!(y.item(), std::f64::consts::LN_2);
}

#[test]
fn l2_normalize_three_four_five() {
    let tape = Tape::new();
    let y = tape.constant(Tensor::vector(vec![3.0, 4.0])).l2_normalize(0).unwrap();
    let v = y.value();
    assert!((v.data()[0] - 0.6).abs() < 1e-15 && (v.data()[1] - 0.8).abs() < 1e-15);
}

#[test]
fn backward_of_sum_of_squares() {
    let tape = Tape::new();
    let x = tape.param(Tensor::vector(vec![1.0, 2.0, 3.0]));
    let root = x.mul(x).unwrap().sum();
    tape.backward(root).unwrap();
    assert_eq!(x.grad().unwrap().data(), &[2.0, 4.0, 6.0]);
}

#[test]
fn softplus_of_dot_has_sigmoid_gradient() {
    let tape = Tape::new();
    let w = tape.param(Tensor::matrix(1, 1, vec![0.0]).unwrap());
    let x = tape.constant(Tensor::matrix(1, 1, vec![1.0]).unwrap());
    let root = x.matmul(w).unwrap().softplus().sum();
    tape.backward(root).unwrap();
    assert_eq!(w.grad().unwrap().data(), &[0.5]);
}

#[test]
fn repeated_backward_accumulates_and_reset_reproduces() {
    let tape = Tape::new();
    let x = tape.param(Tensor::vector(vec![0.3, -1.2, 2.5]));
    let root = x.tanh().mul(x).unwrap().softplus().sum();
    tape.backward(root).unwrap();
    let first = x.grad().unwrap();
    tape.backward(root).unwrap();
    let twice = x.grad().unwrap();
    for (a, b) in first.data().iter().zip(twice.data()) {
        assert_eq!(2.0 * a, *b);
    }
    tape.zero_grad();
    tape.backward(root).unwrap();
    let again = x.grad().unwrap();
    assert_eq!(
        first.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        again.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}

#[test]
fn backward_leaves_values_unmodified() {
    let tape = Tape::new();
    let data = Tensor::vector(vec![0.5, -0.25]);
    let x = tape.param(data.clone());
    let y = x.exp().sum();
    let before = y.item();
    tape.backward(y).unwrap();
    assert_eq!(*x.value(), data);
    assert_eq!(y.item(), before);
}

#[test]
fn forward_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random_tensor(&mut rng, &[7, 5]);
    let b = random_tensor(&mut rng, &[5, 3]);
    let run = || {
        let tape = Tape::new();
        let out = tape.constant(a.clone()).matmul(tape.constant(b.clone())).unwrap();
        let out = out.log_softmax().unwrap().exp().l2_normalize(1).unwrap();
        out.to_tensor().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn errors_name_the_op_and_shapes() {
    let tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    let err = a.matmul(b).unwrap_err();
    assert_eq!(
        err,
        TensorError::ShapeMismatch { op: "matmul", lhs: vec![2, 3], rhs: vec![2, 3] }
    );
    assert!(err.to_string().contains("matmul"));
    let c = tape.constant(Tensor::zeros(&[4]));
    assert!(matches!(a.add(c), Err(TensorError::ShapeMismatch { op: "add", .. })));
    assert!(matches!(a.log(), Err(TensorError::Domain { op: "log", .. })));
    assert!(matches!(a.l2_normalize(1), Err(TensorError::Domain { .. })));
    assert!(matches!(tape.backward(a), Err(TensorError::NonScalarRoot(_))));
}

#[test]
fn constants_are_not_recorded_as_ops() {
    let tape = Tape::new();
    let a = tape.constant(Tensor::vector(vec![1.0, 2.0]));
    let y = a.exp().sum();
    assert!(!y.requires_grad());
    let p = tape.param(Tensor::vector(vec![1.0, 2.0]));
    assert!(p.mul(a).unwrap().requires_grad());
}
