mod common;

use common::*;
use dudgan_core::autodiff::gradcheck::max_gradient_error;
use dudgan_core::autodiff::{Tape, Tensor};
use dudgan_core::objectives::*;
use proptest::prelude::*;
use rand::Rng;

const TOL: f64 = 1e-5;

fn supcon_value(z: &Tensor, labels: &[usize], tau: f64) -> f64 {
    let tape = Tape::new();
    loss_supcon(tape.constant(z.clone()), labels, tau).unwrap().item()
}

#[test]
fn supcon_matches_double_loop_oracle() {
    let mut r = rng(5);
    for case in 0..1000 {
        let n = r.random_range(2..=8);
        let d = r.random_range(1..=5);
        let tau = r.random_range(0.05..1.0);
        let labels = labels_with_pair(&mut r, n, 3);
        let z = unit_rows(&random_matrix(&mut r, n, d));
        let got = supcon_value(&z, &labels, tau);
        let want = supcon_oracle(&z, &labels, tau);
        assert!((got - want).abs() <= 1e-10, "case {case}: {got} vs {want}");
    }
}

#[test]
fn supcon_identical_pair_is_zero() {
    let z = unit_rows(&Tensor::matrix(2, 3, vec![0.3, -1.0, 2.0, 0.3, -1.0, 2.0]).unwrap());
    assert_eq!(supcon_value(&z, &[4, 4], 0.1), 0.0);
}

#[test]
fn supcon_without_positives_is_an_error() {
    let tape = Tape::new();
    let z = tape.constant(unit_rows(&Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap()));
    assert!(loss_supcon(z, &[0, 1], 0.1).is_err());
}

proptest! {
    #[test]
    fn supcon_permutation_invariant(seed in 0u64..10_000, n in 2usize..8) {
        let mut r = rng(seed);
        let labels = labels_with_pair(&mut r, n, 3);
        let z = unit_rows(&random_matrix(&mut r, n, 3));
        let mut perm: Vec<usize> = (0..n).collect();
        perm.reverse();
        perm.rotate_left(seed as usize % n);
        let zp = Tensor::from_rows(&perm.iter().map(|&i| z.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
        let lp: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
        prop_assert!((supcon_value(&z, &labels, 0.2) - supcon_value(&zp, &lp, 0.2)).abs() < 1e-12);
    }

    #[test]
    fn cls_loss_is_nonnegative(seed in 0u64..10_000) {
        let mut r = rng(seed);
        let n = r.random_range(1..6);
        let logits = random_matrix(&mut r, n, 4);
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..4)).collect();
        let tape = Tape::new();
        prop_assert!(loss_cls(tape.constant(logits), &labels).unwrap().item() >= 0.0);
    }
}

fn check(name: &str, make: impl Fn(&mut rand_chacha::ChaCha8Rng) -> (Vec<Tensor>, Vec<usize>), f: impl for<'t> Fn(&'t Tape, &[dudgan_core::autodiff::Var<'t>], &[usize]) -> Result<dudgan_core::autodiff::Var<'t>, dudgan_core::autodiff::TensorError>) {
    let mut r = rng(17);
    for case in 0..100 {
        let (inputs, labels) = make(&mut r);
        let err = max_gradient_error(&inputs, |tape, v| f(tape, v, &labels)).unwrap();
        assert!(err <= TOL, "{name} case {case}: {err:e}");
    }
}

fn logits_pair(r: &mut rand_chacha::ChaCha8Rng) -> (Vec<Tensor>, Vec<usize>) {
    let (a, b) = (r.random_range(1..6), r.random_range(1..6));
    (vec![random_matrix(r, a, 1), random_matrix(r, b, 1)], vec![])
}

fn features(r: &mut rand_chacha::ChaCha8Rng) -> (Vec<Tensor>, Vec<usize>) {
    let n = r.random_range(2..7);
    let labels = labels_with_pair(r, n, 3);
    (vec![random_matrix(r, n, 3), random_matrix(r, n, 3)], labels)
}

#[test]
fn loss_gradients_match_finite_differences() {
    check("loss_d_ns", logits_pair, |_, v, _| loss_d_ns(v[0], v[1]).map_err(obj));
    check("loss_g_adv", logits_pair, |_, v, _| loss_g_adv(v[0]).map_err(obj));
    check("loss_supcon", features, |_, v, l| loss_supcon(v[0].l2_normalize(1)?, l, 0.2).map_err(obj));
    check("loss_cls", features, |_, v, l| loss_cls(v[1], l).map_err(obj));
    let w = LossWeights::default();
    check("loss_classifier_total", features, |_, v, l| {
        loss_classifier_total(v[0].l2_normalize(1)?, v[1], l, &w).map(|p| p.total).map_err(obj)
    });
    let wg = LossWeights { w_cls_gen: 0.3, ..LossWeights::default() };
    check(
        "loss_generator_total",
        |r| {
            let (mut t, l) = features(r);
            t.push(random_matrix(r, l.len(), 1));
            t.push(random_matrix(r, l.len(), 3));
            (t, l)
        },
        |_, v, l| {
            let reference = ContrastReference { f_high: v[3].l2_normalize(1)?, labels: l };
            loss_generator_total(v[2], v[0].l2_normalize(1)?, v[1], l, Some(reference), &wg)
                .map(|p| p.total)
                .map_err(obj)
        },
    );
}
