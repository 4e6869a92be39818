//! Sample-quality metrics on fixed embeddings.
//!
//! Fréchet distance between Gaussian fits, unbiased polynomial-kernel
//! MMD², k-NN manifold precision/recall, and for the Gaussian-mixture data
//! the exact mode coverage and class fidelity.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::datasets::Gmm2dSpec;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("{metric}: needs at least {need} samples per side, got {got}")]
    InsufficientSamples { metric: &'static str, need: usize, got: usize },
    #[error("{metric}: non-finite embedding value")]
    NonFinite { metric: &'static str },
    #[error("frechet_distance: covariance product has eigenvalue {0:e} below -1e-8")]
    NegativeEigenvalue(f64),
    #[error("{metric}: dimension mismatch ({real} vs {fake})")]
    Dimension { metric: &'static str, real: usize, fake: usize },
    #[error("{metric}: {reason}")]
    Mismatch { metric: &'static str, reason: String },
}

const EIGEN_TOLERANCE: f64 = -1e-8;

fn check_pair(metric: &'static str, real: &Tensor, fake: &Tensor, need: usize) -> Result<usize, MetricError> {
    if real.cols() != fake.cols() {
        return Err(MetricError::Dimension { metric, real: real.cols(), fake: fake.cols() });
    }
    let got = real.rows().min(fake.rows());
    if real.is_empty() || fake.is_empty() || got < need {
        return Err(MetricError::InsufficientSamples { metric, need, got: if real.is_empty() || fake.is_empty() { 0 } else { got } });
    }
    if !real.all_finite() || !fake.all_finite() {
        return Err(MetricError::NonFinite { metric });
    }
    Ok(real.cols())
}

fn mean_and_covariance(x: &Tensor) -> (Vec<f64>, DMatrix<f64>) {
    let (n, d) = (x.rows(), x.cols());
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(x.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = DMatrix::zeros(d, d);
    for i in 0..n {
        let row = x.row(i);
        for a in 0..d {
            let da = row[a] - mean[a];
            for b in a..d {
                cov[(a, b)] += da * (row[b] - mean[b]);
            }
        }
    }
    let denom = (n - 1) as f64;
    for a in 0..d {
        for b in a..d {
            let v = cov[(a, b)] / denom;
            cov[(a, b)] = v;
            cov[(b, a)] = v;
        }
    }
    (mean, cov)
}

/// Eigenvalues of a symmetric matrix, with tiny negatives clamped to zero.
fn clamped_eigen(m: DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>, MetricError> {
    let sym = (&m + m.transpose()) * 0.5;
    let mut eig = SymmetricEigen::new(sym);
    for v in eig.eigenvalues.iter_mut() {
        if *v < EIGEN_TOLERANCE {
            return Err(MetricError::NegativeEigenvalue(*v));
        }
        *v = v.max(0.0);
    }
    Ok(eig)
}

/// `‖μ_r − μ_f‖² + Tr(Σ_r + Σ_f − 2 (Σ_r Σ_f)^{1/2})`.
///
/// The trace of the cross term is taken from the symmetric matrix
/// `Σ_r^{1/2} Σ_f Σ_r^{1/2}`, which has the same eigenvalues as `Σ_r Σ_f`.
pub fn frechet_distance(real: &Tensor, fake: &Tensor) -> Result<f64, MetricError> {
    let d = real.cols();
    check_pair("frechet_distance", real, fake, d + 1)?;
    let (mu_r, cov_r) = mean_and_covariance(real);
    let (mu_f, cov_f) = mean_and_covariance(fake);
    let mean_term: f64 = mu_r.iter().zip(&mu_f).map(|(a, b)| (a - b).powi(2)).sum();

    let eig_r = clamped_eigen(cov_r.clone())?;
    let sqrt_vals = DMatrix::from_diagonal(&eig_r.eigenvalues.map(f64::sqrt));
    let sqrt_r = &eig_r.eigenvectors * sqrt_vals * eig_r.eigenvectors.transpose();
    let inner = &sqrt_r * &cov_f * &sqrt_r;
    let cross: f64 = clamped_eigen(inner)?.eigenvalues.iter().map(|v| v.sqrt()).sum();

    let fd = mean_term + cov_r.trace() + cov_f.trace() - 2.0 * cross;
    Ok(fd.max(0.0))
}

fn poly_kernel(x: &[f64], y: &[f64], d: f64, degree: i32) -> f64 {
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    (dot / d + 1.0).powi(degree)
}

/// Unbiased MMD² with kernel `(x·y / d + 1)^degree`.
pub fn kernel_mmd2(real: &Tensor, fake: &Tensor, degree: i32) -> Result<f64, MetricError> {
    let d = check_pair("kernel_mmd2", real, fake, 2)? as f64;
    let (m, n) = (real.rows(), fake.rows());
    let mut k_rr = 0.0;
    for i in 0..m {
        for j in 0..m {
            if i != j {
                k_rr += poly_kernel(real.row(i), real.row(j), d, degree);
            }
        }
    }
    let mut k_ff = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                k_ff += poly_kernel(fake.row(i), fake.row(j), d, degree);
            }
        }
    }
    let mut k_rf = 0.0;
    for i in 0..m {
        for j in 0..n {
            k_rf += poly_kernel(real.row(i), fake.row(j), d, degree);
        }
    }
    Ok(k_rr / (m * (m - 1)) as f64 + k_ff / (n * (n - 1)) as f64 - 2.0 * k_rf / (m * n) as f64)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Squared distance from each row to its k-th nearest other row.
fn knn_radii(x: &Tensor, k: usize) -> Vec<f64> {
    let n = x.rows();
    (0..n)
        .map(|i| {
            let mut d: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| sq_dist(x.row(i), x.row(j))).collect();
            d.sort_by(f64::total_cmp);
            d[k - 1]
        })
        .collect()
}

/// Fraction of `queries` rows inside at least one k-NN ball of `support`.
fn manifold_coverage(support: &Tensor, radii: &[f64], queries: &Tensor) -> f64 {
    let hits = (0..queries.rows())
        .filter(|&q| (0..support.rows()).any(|s| sq_dist(queries.row(q), support.row(s)) <= radii[s]))
        .count();
    hits as f64 / queries.rows() as f64
}

/// k-NN manifold precision and recall.
pub fn precision_recall(real: &Tensor, fake: &Tensor, k: usize) -> Result<(f64, f64), MetricError> {
    check_pair("precision_recall", real, fake, k + 1)?;
    if k == 0 {
        return Err(MetricError::Mismatch { metric: "precision_recall", reason: "k must be positive".into() });
    }
    let real_radii = knn_radii(real, k);
    let fake_radii = knn_radii(fake, k);
    Ok((manifold_coverage(real, &real_radii, fake), manifold_coverage(fake, &fake_radii, real)))
}

/// Fraction of mixture modes hit by any sample within 3σ, and fraction of
/// samples within 3σ of a mode of their own conditioning class.
pub fn mode_coverage_and_fidelity(spec: &Gmm2dSpec, fakes: &Tensor, labels: &[usize]) -> Result<(f64, f64), MetricError> {
    let metric = "mode_coverage_and_fidelity";
    if fakes.cols() != 2 || fakes.rows() != labels.len() {
        return Err(MetricError::Mismatch {
            metric,
            reason: format!("expected {} 2-D samples, got shape {:?}", labels.len(), fakes.shape()),
        });
    }
    if let Some(&c) = labels.iter().find(|&&c| c >= spec.num_classes) {
        return Err(MetricError::Mismatch { metric, reason: format!("label {c} outside 0..{}", spec.num_classes) });
    }
    if labels.is_empty() {
        return Err(MetricError::InsufficientSamples { metric, need: 1, got: 0 });
    }
    let centers = spec.centers();
    let r2 = (3.0 * spec.scaled_std()).powi(2);
    let mut hit = vec![false; centers.len()];
    let mut faithful = 0usize;
    for (i, &c) in labels.iter().enumerate() {
        let p = fakes.row(i);
        let mut own = false;
        for (m, (class, center)) in centers.iter().enumerate() {
            if sq_dist(p, center) <= r2 {
                hit[m] = true;
                own |= *class == c;
            }
        }
        faithful += usize::from(own);
    }
    let coverage = hit.iter().filter(|&&h| h).count() as f64 / centers.len() as f64;
    Ok((coverage, faithful as f64 / labels.len() as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingKind {
    Identity,
    FixedRandomProjection,
}

/// Frozen feature map applied before every distribution metric.
#[derive(Clone, Debug, PartialEq)]
pub enum Embedding {
    Identity,
    /// Seeded two-layer random MLP, `input → hidden (tanh) → d_emb`.
    RandomProjection { w1: Tensor, w2: Tensor },
}

pub const PROJECTION_HIDDEN: usize = 64;
pub const PROJECTION_DIM: usize = 32;

impl Embedding {
    pub fn new(kind: EmbeddingKind, input_dim: usize, seed: u64) -> Self {
        match kind {
            EmbeddingKind::Identity => Self::Identity,
            EmbeddingKind::FixedRandomProjection => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut layer = |fan_in: usize, fan_out: usize| {
                    let s = 1.0 / (fan_in as f64).sqrt();
                    let data = (0..fan_in * fan_out).map(|_| s * rng.sample::<f64, _>(StandardNormal)).collect();
                    Tensor::new(vec![fan_in, fan_out], data).expect("shape")
                };
                let w1 = layer(input_dim, PROJECTION_HIDDEN);
                let w2 = layer(PROJECTION_HIDDEN, PROJECTION_DIM);
                Self::RandomProjection { w1, w2 }
            }
        }
    }

    pub fn dim(&self, input_dim: usize) -> usize {
        match self {
            Self::Identity => input_dim,
            Self::RandomProjection { .. } => PROJECTION_DIM,
        }
    }

    pub fn embed(&self, x: &Tensor) -> Tensor {
        match self {
            Self::Identity => x.clone(),
            Self::RandomProjection { w1, w2 } => {
                let h = dense(x, w1).map(f64::tanh);
                dense(&h, w2)
            }
        }
    }
}

fn dense(x: &Tensor, w: &Tensor) -> Tensor {
    let (n, k, m) = (x.rows(), w.rows(), w.cols());
    let mut out = vec![0.0; n * m];
    crate::autodiff::matmul_nn(x.data(), w.data(), &mut out, n, k, m);
    Tensor::new(vec![n, m], out).expect("shape")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub fd: f64,
    pub fd_per_class: Vec<f64>,
    pub mmd2: f64,
    pub precision: f64,
    pub recall: f64,
    pub mode_coverage: Option<f64>,
    pub class_fidelity: Option<f64>,
    pub n_real: usize,
    pub n_fake: usize,
}

impl MetricsReport {
    pub fn csv_header(num_classes: usize) -> Vec<String> {
        let mut h = vec!["fd".to_string()];
        h.extend((0..num_classes).map(|c| format!("fd_class{c}")));
        h.extend(["mmd2", "precision", "recall", "mode_coverage", "class_fidelity", "n_real", "n_fake"].map(String::from));
        h
    }

    pub fn csv_fields(&self) -> Vec<String> {
        let opt = |v: Option<f64>| v.map_or_else(String::new, |v| format!("{v:?}"));
        let mut f = vec![format!("{:?}", self.fd)];
        f.extend(self.fd_per_class.iter().map(|v| format!("{v:?}")));
        f.push(format!("{:?}", self.mmd2));
        f.push(format!("{:?}", self.precision));
        f.push(format!("{:?}", self.recall));
        f.push(opt(self.mode_coverage));
        f.push(opt(self.class_fidelity));
        f.push(self.n_real.to_string());
        f.push(self.n_fake.to_string());
        f
    }
}

fn rows_of(x: &Tensor, labels: &[usize], c: usize) -> Tensor {
    let d = x.cols();
    let data: Vec<f64> = labels.iter().enumerate().filter(|(_, &l)| l == c).flat_map(|(i, _)| x.row(i).to_vec()).collect();
    let n = data.len() / d.max(1);
    Tensor::new(vec![n, d], data).expect("shape")
}

/// Full report on embedded features. `fd` is the mean of the per-class
/// distances; `gmm` enables mode coverage and class fidelity on raw samples.
pub fn evaluate(
    embedding: &Embedding,
    real: (&Tensor, &[usize]),
    fake: (&Tensor, &[usize]),
    num_classes: usize,
    k: usize,
    gmm: Option<&Gmm2dSpec>,
) -> Result<MetricsReport, MetricError> {
    let real_emb = embedding.embed(real.0);
    let fake_emb = embedding.embed(fake.0);
    let mut fd_per_class = Vec::with_capacity(num_classes);
    for c in 0..num_classes {
        let r = rows_of(&real_emb, real.1, c);
        let f = rows_of(&fake_emb, fake.1, c);
        fd_per_class.push(frechet_distance(&r, &f)?);
    }
    let fd = fd_per_class.iter().sum::<f64>() / num_classes as f64;
    let mmd2 = kernel_mmd2(&real_emb, &fake_emb, 3)?;
    let (precision, recall) = precision_recall(&real_emb, &fake_emb, k)?;
    let (mode_coverage, class_fidelity) = match gmm {
        Some(spec) => {
            let (c, f) = mode_coverage_and_fidelity(spec, fake.0, fake.1)?;
            (Some(c), Some(f))
        }
        None => (None, None),
    };
    Ok(MetricsReport {
        fd,
        fd_per_class,
        mmd2,
        precision,
        recall,
        mode_coverage,
        class_fidelity,
        n_real: real.0.rows(),
        n_fake: fake.0.rows(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn col(v: &[f64]) -> Tensor {
        Tensor::matrix(v.len(), 1, v.to_vec()).unwrap()
    }

    #[test]
    fn constructed_precision_case() {
        let real = col(&[0.0, 1.0, 2.0, 3.0]);
        let fake = col(&[0.5, 100.0]);
        let (p, _) = precision_recall(&real, &fake, 1).unwrap();
        assert_eq!(p, 0.5);
    }

    #[test]
    fn identical_sets_are_perfect() {
        let x = Tensor::from_rows(&[vec![0.0, 1.0], vec![2.0, 0.5], vec![-1.0, 0.3], vec![0.7, 0.7]]).unwrap();
        assert_eq!(precision_recall(&x, &x, 2).unwrap(), (1.0, 1.0));
        assert!(frechet_distance(&x, &x).unwrap().abs() < 1e-8);
    }

    #[test]
    fn far_fakes_have_zero_precision() {
        let real = col(&[0.0, 0.1, 0.2, 0.3]);
        let fake = col(&[50.0, 51.0, 52.0]);
        assert_eq!(precision_recall(&real, &fake, 1).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn collapsed_fake_distance() {
        // Real {−1, 1} repeated: mean 0, variance n/(n−1); fake all zero.
        let real = col(&[-1.0, 1.0, -1.0, 1.0]);
        let fake = col(&[0.0; 4]);
        let fd = frechet_distance(&real, &fake).unwrap();
        assert!((fd - 4.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn insufficient_samples_named() {
        let x = Tensor::zeros(&[2, 2]);
        let err = frechet_distance(&x, &x).unwrap_err();
        assert!(err.to_string().contains("frechet_distance"));
        assert!(kernel_mmd2(&col(&[1.0]), &col(&[1.0, 2.0]), 3).is_err());
    }

    #[test]
    fn mode_metrics_degenerate_cases() {
        let spec = Gmm2dSpec::default();
        let centers = spec.centers();
        let at = centers[0].1;
        let fakes = Tensor::from_rows(&vec![at.to_vec(); 10]).unwrap();
        let (cov, fid) = mode_coverage_and_fidelity(&spec, &fakes, &[0; 10]).unwrap();
        assert_eq!(cov, 1.0 / spec.num_modes() as f64);
        assert_eq!(fid, 1.0);
        let (_, fid) = mode_coverage_and_fidelity(&spec, &fakes, &[1; 10]).unwrap();
        assert_eq!(fid, 0.0);
        assert!(mode_coverage_and_fidelity(&spec, &fakes, &[9; 10]).is_err());
    }

    #[test]
    fn projection_is_seeded() {
        let a = Embedding::new(EmbeddingKind::FixedRandomProjection, 64, 3);
        let b = Embedding::new(EmbeddingKind::FixedRandomProjection, 64, 3);
        assert_eq!(a, b);
        let x = Tensor::full(&[2, 64], 0.5);
        assert_eq!(a.embed(&x).shape(), &[2, PROJECTION_DIM]);
    }
}
