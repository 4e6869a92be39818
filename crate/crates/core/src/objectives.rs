//! Loss functions for the three networks.
//!
//! Adversarial terms use the non-saturating form written with `softplus`.
//! The classifier minimizes a convex blend of supervised contrastive and
//! cross-entropy losses on real samples; the generator blends its
//! adversarial loss with the supervised contrastive loss of its samples
//! under the frozen classifier.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{concat, Tensor, TensorError, Var};

/// Additive mask that removes self-similarity from the softmax denominator.
const SELF_MASK: f64 = -1e9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObjectiveError {
    #[error("{0}: empty batch")]
    EmptyBatch(&'static str),
    #[error("supervised contrastive loss undefined: no anchor has a positive")]
    NoPositives,
    #[error("{op}: label {label} out of range for {num_classes} classes")]
    LabelOutOfRange {
        op: &'static str,
        label: usize,
        num_classes: usize,
    },
    #[error("{op}: {rows} rows but {labels} labels")]
    LabelCount {
        op: &'static str,
        rows: usize,
        labels: usize,
    },
    #[error("invalid loss weight `{name}` = {value}")]
    InvalidWeight { name: &'static str, value: f64 },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_c: f64,
    pub lambda_g: f64,
    pub w_cls_gen: f64,
    pub tau: f64,
    /// Contrast generated features against noised real features of the
    /// same batch, not only against each other.
    pub gen_contrast_with_reals: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_c: 0.95, lambda_g: 0.95, w_cls_gen: 0.0, tau: 0.1, gen_contrast_with_reals: true }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        let unit = |name, value: f64| {
            if (0.0..=1.0).contains(&value) {
                Ok(())
            } else {
                Err(ObjectiveError::InvalidWeight { name, value })
            }
        };
        unit("lambda_c", self.lambda_c)?;
        unit("lambda_g", self.lambda_g)?;
        if !(self.w_cls_gen >= 0.0 && self.w_cls_gen.is_finite()) {
            return Err(ObjectiveError::InvalidWeight { name: "w_cls_gen", value: self.w_cls_gen });
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(ObjectiveError::InvalidWeight { name: "tau", value: self.tau });
        }
        Ok(())
    }
}

fn non_empty(op: &'static str, v: &Var<'_>) -> Result<(), ObjectiveError> {
    if v.value().is_empty() {
        return Err(ObjectiveError::EmptyBatch(op));
    }
    Ok(())
}

/// `mean(softplus(−real)) + mean(softplus(fake))`.
pub fn loss_d_ns<'t>(real_logits: Var<'t>, fake_logits: Var<'t>) -> Result<Var<'t>, ObjectiveError> {
    non_empty("loss_d_ns", &real_logits)?;
    non_empty("loss_d_ns", &fake_logits)?;
    let real = real_logits.neg().softplus().mean()?;
    let fake = fake_logits.softplus().mean()?;
    Ok(real.add(fake)?)
}

/// `mean(softplus(−fake))`.
pub fn loss_g_adv(fake_logits: Var<'_>) -> Result<Var<'_>, ObjectiveError> {
    non_empty("loss_g_adv", &fake_logits)?;
    Ok(fake_logits.neg().softplus().mean()?)
}

/// Supervised contrastive loss over unit-norm rows of `f_high`.
///
/// For every anchor `i` with a non-empty positive set `P(i)`:
/// `−(1/|P(i)|) Σ_{p∈P(i)} log softmax_{a≠i}(z_i·z_a / τ)_p`, averaged over
/// those anchors. Anchors without positives are skipped.
pub fn loss_supcon<'t>(f_high: Var<'t>, labels: &[usize], tau: f64) -> Result<Var<'t>, ObjectiveError> {
    let shape = f_high.shape();
    let n = shape[0];
    if n == 0 {
        return Err(ObjectiveError::EmptyBatch("loss_supcon"));
    }
    if labels.len() != n {
        return Err(ObjectiveError::LabelCount { op: "loss_supcon", rows: n, labels: labels.len() });
    }
    let positives: Vec<usize> = (0..n)
        .map(|i| (0..n).filter(|&p| p != i && labels[p] == labels[i]).count())
        .collect();
    let anchors = positives.iter().filter(|&&c| c > 0).count();
    if anchors == 0 {
        return Err(ObjectiveError::NoPositives);
    }
    let mut weights = vec![0.0; n * n];
    let mut mask = vec![0.0; n * n];
    for i in 0..n {
        mask[i * n + i] = SELF_MASK;
        if positives[i] == 0 {
            continue;
        }
        let w = 1.0 / (positives[i] as f64 * anchors as f64);
        for p in 0..n {
            if p != i && labels[p] == labels[i] {
                weights[i * n + p] = w;
            }
        }
    }
    let tape = f_high.tape();
    let sim = f_high.matmul(f_high.transpose()?)?.scale(1.0 / tau);
    let log_prob = sim.add(tape.constant(Tensor::new(vec![n, n], mask)?))?.log_softmax()?;
    let weighted = log_prob.mul(tape.constant(Tensor::new(vec![n, n], weights)?))?;
    Ok(weighted.sum().neg())
}

/// Mean softmax cross-entropy of `f_cls` logits against `labels`.
pub fn loss_cls<'t>(f_cls: Var<'t>, labels: &[usize]) -> Result<Var<'t>, ObjectiveError> {
    let shape = f_cls.shape();
    let (n, classes) = (shape[0], shape.get(1).copied().unwrap_or(0));
    if n == 0 {
        return Err(ObjectiveError::EmptyBatch("loss_cls"));
    }
    if labels.len() != n {
        return Err(ObjectiveError::LabelCount { op: "loss_cls", rows: n, labels: labels.len() });
    }
    if let Some(&label) = labels.iter().find(|&&c| c >= classes) {
        return Err(ObjectiveError::LabelOutOfRange { op: "loss_cls", label, num_classes: classes });
    }
    let onehot = f_cls.tape().constant(Tensor::one_hot(labels, classes));
    Ok(f_cls.log_softmax()?.mul(onehot)?.sum().scale(-1.0 / n as f64))
}

/// Individual terms of a composite loss, kept for reporting.
#[derive(Clone, Copy, Debug)]
pub struct LossParts<'t> {
    pub total: Var<'t>,
    pub adversarial: Option<Var<'t>>,
    pub contrastive: Option<Var<'t>>,
    pub classification: Option<Var<'t>>,
}

/// `λ_C · L_cont + (1 − λ_C) · L_cls` on real samples. A term with zero
/// weight is not evaluated.
pub fn loss_classifier_total<'t>(
    f_high: Var<'t>,
    f_cls: Var<'t>,
    labels: &[usize],
    w: &LossWeights,
) -> Result<LossParts<'t>, ObjectiveError> {
    let contrastive = (w.lambda_c > 0.0).then(|| loss_supcon(f_high, labels, w.tau)).transpose()?;
    let classification = (w.lambda_c < 1.0).then(|| loss_cls(f_cls, labels)).transpose()?;
    let total = match (contrastive, classification) {
        (Some(c), Some(x)) => c.scale(w.lambda_c).add(x.scale(1.0 - w.lambda_c))?,
        (Some(c), None) => c,
        (None, Some(x)) => x,
        (None, None) => unreachable!("lambda_c is either positive or below one"),
    };
    Ok(LossParts { total, adversarial: None, contrastive, classification })
}

/// Noised real features used as extra contrast candidates for the
/// generator's contrastive term.
#[derive(Clone, Copy, Debug)]
pub struct ContrastReference<'t, 'l> {
    pub f_high: Var<'t>,
    pub labels: &'l [usize],
}

/// `λ_G · L_adv + (1 − λ_G) · L_cont + w_cls · L_cls` on generated samples.
///
/// With a `reference`, the contrastive term runs over the generated rows
/// stacked on top of the reference rows, so generated features of class
/// `c` are pulled toward real features of class `c`.
pub fn loss_generator_total<'t>(
    fake_logits: Var<'t>,
    f_high_fake: Var<'t>,
    f_cls_fake: Var<'t>,
    labels_fake: &[usize],
    reference: Option<ContrastReference<'t, '_>>,
    w: &LossWeights,
) -> Result<LossParts<'t>, ObjectiveError> {
    let adversarial = loss_g_adv(fake_logits)?;
    let mut total = if w.lambda_g < 1.0 { adversarial.scale(w.lambda_g) } else { adversarial };
    let contrastive = if w.lambda_g < 1.0 {
        let c = match reference {
            Some(r) => {
                let feats = concat(&[f_high_fake, r.f_high], 0)?;
                let labels: Vec<usize> = labels_fake.iter().chain(r.labels).copied().collect();
                loss_supcon(feats, &labels, w.tau)?
            }
            None => loss_supcon(f_high_fake, labels_fake, w.tau)?,
        };
        total = total.add(c.scale(1.0 - w.lambda_g))?;
        Some(c)
    } else {
        None
    };
    let classification = if w.w_cls_gen > 0.0 {
        let c = loss_cls(f_cls_fake, labels_fake)?;
        total = total.add(c.scale(w.w_cls_gen))?;
        Some(c)
    } else {
        None
    };
    Ok(LossParts { total, adversarial: Some(adversarial), contrastive, classification })
}
