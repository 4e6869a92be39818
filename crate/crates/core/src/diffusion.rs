//! Forward-diffusion noise injection.
//!
//! A linear β schedule defines the retained-signal table
//! `ᾱ_t = Π_{k≤t} (1 − β_k)`. Samples are noised in closed form as
//! `√ᾱ_t·x₀ + √(1−ᾱ_t)·σ·ε`; the sequential chain is kept only as an
//! independent reference for the closed form. Timesteps are drawn from a
//! mixture over `1..=t_max`, where `t_max` follows the current noise
//! intensity of the network being fed.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffusionError {
    #[error("invalid diffusion parameter `{name}` = {value}")]
    InvalidParameter { name: &'static str, value: f64 },
    #[error("timestep {t} outside 1..={t_steps}")]
    TimestepOutOfRange { t: usize, t_steps: usize },
    #[error("intensity {0} outside [0, 1]")]
    Intensity(f64),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Mixture weights over the active timestep range.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimestepWeighting {
    /// `w_t ∝ t`: noisier timesteps are drawn more often.
    Priority,
    Uniform,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    t_steps: usize,
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma: f64,
    weighting: TimestepWeighting,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimestepSample {
    pub t: usize,
    pub t_max: usize,
    /// Normalized mixture weight of the drawn timestep.
    pub weight_mass: f64,
}

impl DiffusionSchedule {
    pub fn new(
        t_steps: usize,
        beta_min: f64,
        beta_max: f64,
        sigma: f64,
        weighting: TimestepWeighting,
    ) -> Result<Self, DiffusionError> {
        if t_steps < 2 {
            return Err(DiffusionError::InvalidParameter { name: "t_steps", value: t_steps as f64 });
        }
        if !(beta_min > 0.0 && beta_min < 1.0) {
            return Err(DiffusionError::InvalidParameter { name: "beta_min", value: beta_min });
        }
        if !(beta_max >= beta_min && beta_max < 1.0) {
            return Err(DiffusionError::InvalidParameter { name: "beta_max", value: beta_max });
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(DiffusionError::InvalidParameter { name: "sigma", value: sigma });
        }
        let beta: Vec<f64> = (0..t_steps)
            .map(|i| beta_min + (beta_max - beta_min) * i as f64 / (t_steps - 1) as f64)
            .collect();
        let alpha_bar = beta
            .iter()
            .scan(1.0, |acc, b| {
                *acc *= 1.0 - b;
                Some(*acc)
            })
            .collect();
        Ok(Self { t_steps, beta, alpha_bar, sigma, weighting })
    }

    pub fn t_steps(&self) -> usize {
        self.t_steps
    }

    /// `β_t` for `t` in `1..=t_steps`, index 0 holding `β_1`.
    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    /// `ᾱ_t` for `t` in `1..=t_steps`, index 0 holding `ᾱ_1`.
    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn weighting(&self) -> TimestepWeighting {
        self.weighting
    }

    fn check_t(&self, t: usize) -> Result<(), DiffusionError> {
        if t == 0 || t > self.t_steps {
            return Err(DiffusionError::TimestepOutOfRange { t, t_steps: self.t_steps });
        }
        Ok(())
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64, DiffusionError> {
        self.check_t(t)?;
        Ok(self.alpha_bar[t - 1])
    }

    /// Signal-to-noise ratio `ᾱ_t / ((1 − ᾱ_t) σ²)`.
    pub fn snr(&self, t: usize) -> Result<f64, DiffusionError> {
        let a = self.alpha_bar(t)?;
        Ok(a / ((1.0 - a) * self.sigma * self.sigma))
    }

    /// Largest usable timestep at a given intensity.
    pub fn max_timestep(&self, intensity: f64) -> Result<usize, DiffusionError> {
        if !(0.0..=1.0).contains(&intensity) {
            return Err(DiffusionError::Intensity(intensity));
        }
        Ok(((intensity * self.t_steps as f64).round() as usize).max(1))
    }

    /// Normalized mixture weights over `1..=t_max` (index 0 is `t = 1`).
    pub fn timestep_weights(&self, t_max: usize) -> Vec<f64> {
        match self.weighting {
            TimestepWeighting::Uniform => vec![1.0 / t_max as f64; t_max],
            TimestepWeighting::Priority => {
                let total = (t_max * (t_max + 1) / 2) as f64;
                (1..=t_max).map(|t| t as f64 / total).collect()
            }
        }
    }

    pub fn sample_timestep<R: Rng + ?Sized>(
        &self,
        intensity: f64,
        rng: &mut R,
    ) -> Result<TimestepSample, DiffusionError> {
        let t_max = self.max_timestep(intensity)?;
        let weights = self.timestep_weights(t_max);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut t = t_max;
        for (i, w) in weights.iter().enumerate() {
            acc += w;
            if u < acc {
                t = i + 1;
                break;
            }
        }
        Ok(TimestepSample { t, t_max, weight_mass: weights[t - 1] })
    }

    /// Closed-form noising of every row of `x0` at a single timestep.
    pub fn noise_marginal<'t, R: Rng + ?Sized>(
        &self,
        x0: Var<'t>,
        t: usize,
        rng: &mut R,
    ) -> Result<Var<'t>, DiffusionError> {
        let rows = x0.shape().first().copied().unwrap_or(1);
        self.noise_rows(x0, &vec![t; rows], rng)
    }

    /// Closed-form noising with one timestep per row of `x0`.
    pub fn noise_rows<'t, R: Rng + ?Sized>(
        &self,
        x0: Var<'t>,
        ts: &[usize],
        rng: &mut R,
    ) -> Result<Var<'t>, DiffusionError> {
        let shape = x0.shape();
        let eps = standard_normal(&shape, rng);
        self.noise_rows_with(x0, ts, &eps)
    }

    /// Closed-form noising with caller-supplied `ε`.
    ///
    /// The output depends on `x0` affinely, with slope `√ᾱ_t` per row, and
    /// carries gradient back to `x0`.
    pub fn noise_rows_with<'t>(
        &self,
        x0: Var<'t>,
        ts: &[usize],
        eps: &Tensor,
    ) -> Result<Var<'t>, DiffusionError> {
        let shape = x0.shape();
        let rows = shape.first().copied().unwrap_or(1);
        if ts.len() != rows || eps.shape() != shape.as_slice() {
            return Err(TensorError::ShapeMismatch {
                op: "noise_marginal",
                lhs: shape,
                rhs: eps.shape().to_vec(),
            }
            .into());
        }
        let cols = if rows == 0 { 0 } else { eps.len() / rows };
        let mut signal = Vec::with_capacity(rows);
        let mut noise = Vec::with_capacity(eps.len());
        for (r, &t) in ts.iter().enumerate() {
            let a = self.alpha_bar(t)?;
            signal.push(a.sqrt());
            let scale = (1.0 - a).sqrt() * self.sigma;
            noise.extend(eps.data()[r * cols..(r + 1) * cols].iter().map(|e| scale * e));
        }
        let tape: &Tape = x0.tape();
        let mut coef_shape = vec![1; shape.len().max(1)];
        coef_shape[0] = rows;
        let coef = tape.constant(Tensor::new(coef_shape, signal)?);
        let noise = tape.constant(Tensor::new(shape, noise)?);
        Ok(x0.mul(coef)?.add(noise)?)
    }

    /// Runs `t` sequential single-step transitions
    /// `x_k = √(1−β_k)·x_{k−1} + √β_k·σ·ε_k`.
    pub fn noise_chain<R: Rng + ?Sized>(
        &self,
        x0: &Tensor,
        t: usize,
        rng: &mut R,
    ) -> Result<Tensor, DiffusionError> {
        self.check_t(t)?;
        Ok(chain(&self.beta[..t], self.sigma, x0, rng))
    }
}

fn chain<R: Rng + ?Sized>(betas: &[f64], sigma: f64, x0: &Tensor, rng: &mut R) -> Tensor {
    let mut x = x0.clone();
    for &b in betas {
        let keep = (1.0 - b).sqrt();
        let spread = b.sqrt() * sigma;
        for v in x.data_mut() {
            let e: f64 = rng.sample(StandardNormal);
            *v = keep * *v + spread * e;
        }
    }
    x
}

pub fn standard_normal<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape product matches")
}
