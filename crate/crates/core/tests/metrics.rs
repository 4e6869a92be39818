mod common;

use common::*;
use dudgan_core::autodiff::Tensor;
use dudgan_core::datasets::Gmm2dSpec;
use dudgan_core::metrics::*;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

fn gaussian_col(seed: u64, n: usize, mean: f64, std: f64) -> Tensor {
    let mut r = rng(seed);
    Tensor::matrix(n, 1, (0..n).map(|_| mean + std * r.sample::<f64, _>(StandardNormal)).collect()).unwrap()
}

#[test]
fn frechet_shifted_gaussians() {
    let fd = frechet_distance(&gaussian_col(1, 50_000, 0.0, 1.0), &gaussian_col(2, 50_000, 3.0, 1.0)).unwrap();
    assert!((fd - 9.0).abs() / 9.0 < 0.05, "{fd}");
}

#[test]
fn frechet_collapsed_variance() {
    let fd = frechet_distance(&gaussian_col(3, 50_000, 0.0, 1.0), &Tensor::zeros(&[50_000, 1])).unwrap();
    assert!((fd - 1.0).abs() < 0.05, "{fd}");
}

#[test]
fn frechet_symmetric_in_several_dims() {
    let mut r = rng(4);
    let a = random_matrix(&mut r, 200, 4);
    let b = random_matrix(&mut r, 150, 4).map(|v| 0.5 * v + 0.2);
    let ab = frechet_distance(&a, &b).unwrap();
    let ba = frechet_distance(&b, &a).unwrap();
    assert!((ab - ba).abs() < 1e-9 * ab.max(1.0), "{ab} {ba}");
    assert!(frechet_distance(&a, &a).unwrap().abs() < 1e-8);
}

#[test]
fn mmd_matches_double_loop() {
    let mut r = rng(6);
    for _ in 0..50 {
        let (m, n, d) = (r.random_range(2..=64), r.random_range(2..=64), r.random_range(1..=5));
        let x = random_matrix(&mut r, m, d);
        let y = random_matrix(&mut r, n, d);
        let got = kernel_mmd2(&x, &y, 3).unwrap();
        assert!((got - mmd2_oracle(&x, &y)).abs() <= 1e-12 * got.abs().max(1.0));
    }
}

#[test]
fn mmd_same_distribution_near_zero_and_separated_positive() {
    let x = gaussian_col(7, 2000, 0.0, 1.0);
    let y = gaussian_col(8, 2000, 0.0, 1.0);
    let v = kernel_mmd2(&x, &y, 3).unwrap();
    // Permutation calibration: the spread of MMD² under random relabeling.
    let pooled: Vec<f64> = x.data().iter().chain(y.data()).copied().collect();
    let mut r = rng(9);
    let mut null = Vec::new();
    for _ in 0..20 {
        let mut p = pooled.clone();
        rand::seq::SliceRandom::shuffle(p.as_mut_slice(), &mut r);
        let a = Tensor::matrix(2000, 1, p[..2000].to_vec()).unwrap();
        let b = Tensor::matrix(2000, 1, p[2000..].to_vec()).unwrap();
        null.push(kernel_mmd2(&a, &b, 3).unwrap());
    }
    let sd = (null.iter().map(|v| v * v).sum::<f64>() / null.len() as f64).sqrt();
    assert!(v.abs() < 3.0 * sd, "{v} vs sd {sd}");
    let far = gaussian_col(10, 200, 8.0, 0.1);
    assert!(kernel_mmd2(&x, &far, 3).unwrap() > 0.0);
}

#[test]
fn gmm_samples_have_full_coverage_and_fidelity() {
    let spec = Gmm2dSpec::default();
    let ds = spec.generate(11).unwrap();
    let (cov, fid) = mode_coverage_and_fidelity(&spec, ds.features(), ds.labels()).unwrap();
    assert_eq!(cov, 1.0);
    assert!((fid - 0.9973).abs() < 0.01, "{fid}");
    let shifted: Vec<usize> = ds.labels().iter().map(|l| (l + 1) % spec.num_classes).collect();
    let (_, fid) = mode_coverage_and_fidelity(&spec, ds.features(), &shifted).unwrap();
    assert!(fid < 0.01, "{fid}");
}

proptest! {
    #[test]
    fn precision_recall_permutation_invariant(seed in 0u64..1000) {
        let mut r = rng(seed);
        let real = random_matrix(&mut r, 12, 2);
        let fake = random_matrix(&mut r, 10, 2);
        let rev = |t: &Tensor| Tensor::from_rows(&(0..t.rows()).rev().map(|i| t.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
        let a = precision_recall(&real, &fake, 3).unwrap();
        prop_assert_eq!(a, precision_recall(&rev(&real), &rev(&fake), 3).unwrap());
        prop_assert!((0.0..=1.0).contains(&a.0) && (0.0..=1.0).contains(&a.1));
    }
}
