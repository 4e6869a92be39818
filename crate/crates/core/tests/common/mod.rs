//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use dudgan_core::autodiff::{Tape, Tensor, TensorError, Var};
use dudgan_core::objectives::ObjectiveError;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

pub fn unit_rows(x: &Tensor) -> Tensor {
    let cols = x.cols();
    let mut out = x.clone();
    for r in out.data_mut().chunks_mut(cols) {
        let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        r.iter_mut().for_each(|v| *v /= n);
    }
    out
}

/// Supervised contrastive loss by explicit loops over anchors, positives
/// and the denominator set. `z` rows must be unit length.
pub fn supcon_oracle(z: &Tensor, labels: &[usize], tau: f64) -> f64 {
    let n = labels.len();
    let dot = |i: usize, j: usize| z.row(i).iter().zip(z.row(j)).map(|(a, b)| a * b).sum::<f64>() / tau;
    let mut total = 0.0;
    let mut anchors = 0;
    for i in 0..n {
        let positives: Vec<usize> = (0..n).filter(|&p| p != i && labels[p] == labels[i]).collect();
        if positives.is_empty() {
            continue;
        }
        let mut denom = 0.0;
        for a in 0..n {
            if a != i {
                denom += dot(i, a).exp();
            }
        }
        let mut li = 0.0;
        for &p in &positives {
            li -= (dot(i, p).exp() / denom).ln();
        }
        total += li / positives.len() as f64;
        anchors += 1;
    }
    total / anchors as f64
}

/// Unbiased MMD² with the cubic polynomial kernel, as three plain loops.
pub fn mmd2_oracle(x: &Tensor, y: &Tensor) -> f64 {
    let d = x.cols() as f64;
    let k = |a: &[f64], b: &[f64]| {
        let mut s = 0.0;
        for i in 0..a.len() {
            s += a[i] * b[i];
        }
        (s / d + 1.0).powi(3)
    };
    let (m, n) = (x.rows(), y.rows());
    let mut xx = 0.0;
    for i in 0..m {
        for j in 0..m {
            if i != j {
                xx += k(x.row(i), x.row(j));
            }
        }
    }
    let mut yy = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                yy += k(y.row(i), y.row(j));
            }
        }
    }
    let mut xy = 0.0;
    for i in 0..m {
        for j in 0..n {
            xy += k(x.row(i), y.row(j));
        }
    }
    xx / (m * (m - 1)) as f64 + yy / (n * (n - 1)) as f64 - 2.0 * xy / (m * n) as f64
}

/// Random labels where at least one label repeats.
pub fn labels_with_pair(rng: &mut ChaCha8Rng, n: usize, classes: usize) -> Vec<usize> {
    loop {
        let l: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
        if (0..n).any(|i| (0..n).any(|j| i != j && l[i] == l[j])) {
            return l;
        }
    }
}

pub fn obj(e: ObjectiveError) -> TensorError {
    match e {
        ObjectiveError::Tensor(t) => t,
        _ => TensorError::Empty("objective precondition"),
    }
}

/// Hand-simulated discriminator-intensity recurrence with both clamps.
pub fn simulate_discriminator(stream: &[f64], target: f64, step: f64, max: f64) -> Vec<f64> {
    let mut t = 0.0f64;
    let mut out = Vec::with_capacity(stream.len());
    for (k, &r) in stream.iter().enumerate() {
        if k % 4 == 0 {
            let s = if r > target {
                1.0
            } else if r < target {
                -1.0
            } else {
                0.0
            };
            t += s * step;
            if t < 0.0 {
                t = 0.0;
            }
            if t > max {
                t = max;
            }
        }
        out.push(t);
    }
    out
}

pub fn scalar_of<'t>(tape: &'t Tape, out: Var<'t>, seed: u64) -> Result<Var<'t>, TensorError> {
    let mut r = rng(seed);
    let w = Tensor::new(out.shape(), (0..out.to_tensor().len()).map(|_| r.random_range(-1.0..1.0)).collect())?;
    Ok(out.mul(tape.constant(w))?.sum())
}

pub fn net(e: dudgan_core::networks::NetworkError) -> TensorError {
    match e {
        dudgan_core::networks::NetworkError::Tensor(t) => t,
        _ => TensorError::Empty("network precondition"),
    }
}
