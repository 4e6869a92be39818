//! Generator, discriminator and dual-headed classifier as MLPs.
//!
//! Parameters live in a [`ParamSet`] (named tensors in a fixed order) so
//! that optimizers and checkpoints treat all three networks uniformly. A
//! forward pass first binds the set onto a tape, then reads the bound
//! variables positionally.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{concat, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetworkError {
    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },
    #[error("{network}: expected input width {expected}, got {got}")]
    InputWidth {
        network: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{network}: {rows} rows but {labels} labels or timesteps")]
    RowCount {
        network: &'static str,
        rows: usize,
        labels: usize,
    },
    #[error("parameter `{0}` missing or misshapen")]
    Param(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn push(&mut self, name: impl Into<String>, value: Tensor) {
        self.entries.push((name.into(), value));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().map(Tensor::len).sum()
    }

    /// Records every tensor on `tape`; `trainable` decides whether the
    /// leaves collect gradients.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Vec<Var<'t>> {
        self.tensors().map(|t| tape.leaf(t.clone(), trainable)).collect()
    }

    /// Gradients of bound leaves, zero where no gradient reached them.
    pub fn grads(&self, bound: &[Var<'_>]) -> Vec<Tensor> {
        bound
            .iter()
            .map(|v| v.grad().unwrap_or_else(|| Tensor::zeros(&v.shape())))
            .collect()
    }

    /// Replaces every tensor whose name matches, checking shapes.
    pub fn load(&mut self, source: &ParamSet) -> Result<(), NetworkError> {
        for (name, t) in self.entries.iter_mut() {
            let src = source.get(name).ok_or_else(|| NetworkError::Param(name.clone()))?;
            if src.shape() != t.shape() {
                return Err(NetworkError::Param(name.clone()));
            }
            *t = src.clone();
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().all(Tensor::all_finite)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputActivation {
    Tanh,
    Linear,
}

/// Shape of an MLP: input width, hidden widths, output width.
#[derive(Clone, Debug, PartialEq)]
struct MlpShape {
    widths: Vec<usize>,
}

impl MlpShape {
    fn new(input: usize, hidden_layers: usize, hidden_units: usize, output: usize) -> Self {
        let mut widths = vec![input];
        widths.extend(std::iter::repeat_n(hidden_units, hidden_layers));
        widths.push(output);
        Self { widths }
    }

    fn num_layers(&self) -> usize {
        self.widths.len() - 1
    }

    fn init<R: Rng + ?Sized>(&self, prefix: &str, zero_last: bool, params: &mut ParamSet, rng: &mut R) {
        for (i, pair) in self.widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let last = i + 1 == self.num_layers();
            let weight = if last && zero_last {
                Tensor::zeros(&[fan_in, fan_out])
            } else {
                normal_init(fan_in, fan_out, rng)
            };
            params.push(format!("{prefix}.{i}.weight"), weight);
            params.push(format!("{prefix}.{i}.bias"), Tensor::zeros(&[fan_out]));
        }
    }
}

fn normal_init<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let scale = 1.0 / (fan_in as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("init shape")
}

/// Applies `layers` (weight, bias) pairs with leaky-ReLU between them; the
/// last layer is left linear unless `activate_last`.
fn mlp_forward<'t>(
    mut x: Var<'t>,
    layers: &[Var<'t>],
    slope: f64,
    activate_last: bool,
) -> Result<Var<'t>, TensorError> {
    let n = layers.len() / 2;
    for i in 0..n {
        x = x.matmul(layers[2 * i])?.add(layers[2 * i + 1])?;
        if i + 1 < n || activate_last {
            x = x.leaky_relu(slope);
        }
    }
    Ok(x)
}

/// Sinusoidal embedding of `t / t_steps` at geometric frequencies from
/// `π / t_steps` up to `π`.
pub fn timestep_embedding(t: usize, t_steps: usize, d_t: usize) -> Vec<f64> {
    let s = t as f64 / t_steps as f64;
    let n_freq = d_t.div_ceil(2);
    let mut out = Vec::with_capacity(d_t);
    for i in 0..n_freq {
        let exponent = if n_freq > 1 { i as f64 / (n_freq - 1) as f64 } else { 0.0 };
        let angle = PI * s * (t_steps as f64).powf(exponent);
        out.push(angle.sin());
        if out.len() < d_t {
            out.push(angle.cos());
        }
    }
    out
}

fn timestep_rows(ts: &[usize], t_steps: usize, d_t: usize) -> Tensor {
    let data = ts.iter().flat_map(|&t| timestep_embedding(t, t_steps, d_t)).collect();
    Tensor::new(vec![ts.len(), d_t], data).expect("embedding shape")
}

fn check_labels(labels: &[usize], num_classes: usize) -> Result<(), NetworkError> {
    match labels.iter().find(|&&c| c >= num_classes) {
        Some(&label) => Err(NetworkError::LabelOutOfRange { label, num_classes }),
        None => Ok(()),
    }
}

fn check_input(network: &'static str, x: &Var<'_>, width: usize, rows: usize) -> Result<(), NetworkError> {
    let shape = x.shape();
    if shape.len() != 2 || shape[1] != width {
        return Err(NetworkError::InputWidth {
            network,
            expected: width,
            got: shape.get(1).copied().unwrap_or(0),
        });
    }
    if shape[0] != rows {
        return Err(NetworkError::RowCount { network, rows: shape[0], labels: rows });
    }
    Ok(())
}

/// Architecture hyperparameters shared by the three networks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub hidden_layers: usize,
    pub hidden_units: usize,
    pub leaky_slope: f64,
    pub d_z: usize,
    pub d_e: usize,
    pub d_t: usize,
    pub d_h: usize,
    pub output_activation: OutputActivation,
    /// Appends a class embedding to the discriminator input (ablation).
    pub class_conditional_discriminator: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            hidden_layers: 3,
            hidden_units: 256,
            leaky_slope: 0.2,
            d_z: 16,
            d_e: 32,
            d_t: 16,
            d_h: 128,
            output_activation: OutputActivation::Tanh,
            class_conditional_discriminator: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    pub params: ParamSet,
    num_classes: usize,
    data_dim: usize,
    d_z: usize,
    slope: f64,
    output_activation: OutputActivation,
}

impl Generator {
    pub fn new<R: Rng + ?Sized>(cfg: &NetworkConfig, num_classes: usize, data_dim: usize, rng: &mut R) -> Self {
        let mut params = ParamSet::default();
        let emb = Tensor::new(
            vec![num_classes, cfg.d_e],
            (0..num_classes * cfg.d_e).map(|_| rng.sample(StandardNormal)).collect(),
        )
        .expect("embedding shape");
        params.push("gen.class_embedding", emb);
        MlpShape::new(cfg.d_z + cfg.d_e, cfg.hidden_layers, cfg.hidden_units, data_dim)
            .init("gen.mlp", true, &mut params, rng);
        Self {
            params,
            num_classes,
            data_dim,
            d_z: cfg.d_z,
            slope: cfg.leaky_slope,
            output_activation: cfg.output_activation,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn data_dim(&self) -> usize {
        self.data_dim
    }

    pub fn d_z(&self) -> usize {
        self.d_z
    }

    /// `G(z, c)` on bound parameters.
    pub fn forward<'t>(&self, bound: &[Var<'t>], z: Var<'t>, labels: &[usize]) -> Result<Var<'t>, NetworkError> {
        check_labels(labels, self.num_classes)?;
        let mix = z.tape().constant(Tensor::one_hot(labels, self.num_classes));
        self.forward_mixed(bound, z, mix)
    }

    /// Generator on soft class weights `mix[batch × num_classes]`; the
    /// conditioning vector is `mix · E`, so a one-hot row selects one
    /// embedding exactly and a convex row interpolates between embeddings.
    pub fn forward_mixed<'t>(&self, bound: &[Var<'t>], z: Var<'t>, mix: Var<'t>) -> Result<Var<'t>, NetworkError> {
        let rows = mix.shape()[0];
        check_input("generator", &z, self.d_z, rows)?;
        let cond = mix.matmul(bound[0])?;
        let h = concat(&[z, cond], 1)?;
        let out = mlp_forward(h, &bound[1..], self.slope, false)?;
        Ok(match self.output_activation {
            OutputActivation::Tanh => out.tanh(),
            OutputActivation::Linear => out,
        })
    }

    /// Convenience forward pass outside training.
    pub fn generate(&self, z: &Tensor, labels: &[usize]) -> Result<Tensor, NetworkError> {
        let tape = Tape::new();
        let bound = self.params.bind(&tape, false);
        let out = self.forward(&bound, tape.constant(z.clone()), labels)?;
        Ok(out.to_tensor())
    }

    pub fn generate_mixed(&self, z: &Tensor, mix: &Tensor) -> Result<Tensor, NetworkError> {
        let tape = Tape::new();
        let bound = self.params.bind(&tape, false);
        let out = self.forward_mixed(&bound, tape.constant(z.clone()), tape.constant(mix.clone()))?;
        Ok(out.to_tensor())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    pub params: ParamSet,
    data_dim: usize,
    t_steps: usize,
    d_t: usize,
    slope: f64,
    /// Present when the discriminator is class-conditioned.
    num_classes: Option<usize>,
}

impl Discriminator {
    pub fn new<R: Rng + ?Sized>(
        cfg: &NetworkConfig,
        num_classes: usize,
        data_dim: usize,
        t_steps: usize,
        rng: &mut R,
    ) -> Self {
        let mut params = ParamSet::default();
        let mut input = data_dim + cfg.d_t;
        let conditional = cfg.class_conditional_discriminator.then_some(num_classes);
        if conditional.is_some() {
            let emb = Tensor::new(
                vec![num_classes, cfg.d_e],
                (0..num_classes * cfg.d_e).map(|_| rng.sample(StandardNormal)).collect(),
            )
            .expect("embedding shape");
            params.push("disc.class_embedding", emb);
            input += cfg.d_e;
        }
        MlpShape::new(input, cfg.hidden_layers, cfg.hidden_units, 1).init("disc.mlp", true, &mut params, rng);
        Self { params, data_dim, t_steps, d_t: cfg.d_t, slope: cfg.leaky_slope, num_classes: conditional }
    }

    pub fn is_class_conditional(&self) -> bool {
        self.num_classes.is_some()
    }

    /// Logits `[batch × 1]` with one timestep per row. `labels` is read
    /// only by a class-conditional discriminator.
    pub fn forward<'t>(
        &self,
        bound: &[Var<'t>],
        x: Var<'t>,
        ts: &[usize],
        labels: &[usize],
    ) -> Result<Var<'t>, NetworkError> {
        check_input("discriminator", &x, self.data_dim, ts.len())?;
        let tape = x.tape();
        let temb = tape.constant(timestep_rows(ts, self.t_steps, self.d_t));
        match self.num_classes {
            None => {
                let h = concat(&[x, temb], 1)?;
                Ok(mlp_forward(h, bound, self.slope, false)?)
            }
            Some(num_classes) => {
                check_labels(labels, num_classes)?;
                if labels.len() != ts.len() {
                    return Err(NetworkError::RowCount { network: "discriminator", rows: ts.len(), labels: labels.len() });
                }
                let cond = tape.constant(Tensor::one_hot(labels, num_classes)).matmul(bound[0])?;
                let h = concat(&[x, temb, cond], 1)?;
                Ok(mlp_forward(h, &bound[1..], self.slope, false)?)
            }
        }
    }

    pub fn discriminate(&self, x: &Tensor, t: usize, labels: &[usize]) -> Result<Tensor, NetworkError> {
        let tape = Tape::new();
        let bound = self.params.bind(&tape, false);
        let ts = vec![t; x.rows()];
        Ok(self.forward(&bound, tape.constant(x.clone()), &ts, labels)?.to_tensor())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    pub params: ParamSet,
    data_dim: usize,
    num_classes: usize,
    t_steps: usize,
    d_t: usize,
    slope: f64,
    trunk_params: usize,
}

/// The two classifier outputs: unit-norm contrastive features and class
/// logits.
#[derive(Clone, Copy, Debug)]
pub struct ClassifierOutput<'t> {
    pub f_high: Var<'t>,
    pub f_cls: Var<'t>,
}

impl Classifier {
    pub fn new<R: Rng + ?Sized>(
        cfg: &NetworkConfig,
        num_classes: usize,
        data_dim: usize,
        t_steps: usize,
        rng: &mut R,
    ) -> Self {
        let mut params = ParamSet::default();
        let trunk = MlpShape::new(
            data_dim + cfg.d_t,
            cfg.hidden_layers.saturating_sub(1),
            cfg.hidden_units,
            cfg.hidden_units,
        );
        trunk.init("cls.trunk", false, &mut params, rng);
        let trunk_params = params.len();
        MlpShape::new(cfg.hidden_units, 0, 0, cfg.d_h).init("cls.head_high", false, &mut params, rng);
        MlpShape::new(cfg.hidden_units, 0, 0, num_classes).init("cls.head_cls", false, &mut params, rng);
        Self { params, data_dim, num_classes, t_steps, d_t: cfg.d_t, slope: cfg.leaky_slope, trunk_params }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// `C(x_t) = (f_high, f_cls)`. The classifier never sees labels.
    pub fn forward<'t>(&self, bound: &[Var<'t>], x: Var<'t>, ts: &[usize]) -> Result<ClassifierOutput<'t>, NetworkError> {
        check_input("classifier", &x, self.data_dim, ts.len())?;
        let temb = x.tape().constant(timestep_rows(ts, self.t_steps, self.d_t));
        let h = concat(&[x, temb], 1)?;
        let trunk = mlp_forward(h, &bound[..self.trunk_params], self.slope, true)?;
        let high = &bound[self.trunk_params..self.trunk_params + 2];
        let cls = &bound[self.trunk_params + 2..self.trunk_params + 4];
        let f_high = trunk.matmul(high[0])?.add(high[1])?.l2_normalize(1)?;
        let f_cls = trunk.matmul(cls[0])?.add(cls[1])?;
        Ok(ClassifierOutput { f_high, f_cls })
    }

    pub fn classify(&self, x: &Tensor, t: usize) -> Result<(Tensor, Tensor), NetworkError> {
        let tape = Tape::new();
        let bound = self.params.bind(&tape, false);
        let ts = vec![t; x.rows()];
        let out = self.forward(&bound, tape.constant(x.clone()), &ts)?;
        Ok((out.f_high.to_tensor(), out.f_cls.to_tensor()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> NetworkConfig {
        NetworkConfig { hidden_layers: 2, hidden_units: 12, d_z: 4, d_e: 6, d_t: 8, d_h: 5, ..Default::default() }
    }

    #[test]
    fn timestep_embedding_is_bounded_and_distinct() {
        let a = timestep_embedding(1, 64, 16);
        let b = timestep_embedding(64, 64, 16);
        assert_eq!(a.len(), 16);
        assert!(a.iter().chain(&b).all(|v| (-1.0..=1.0).contains(v)));
        assert_ne!(a, b);
        assert_eq!(timestep_embedding(5, 64, 7).len(), 7);
    }

    #[test]
    fn zero_output_layer_generates_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = Generator::new(&small_cfg(), 3, 2, &mut rng);
        let z = crate::diffusion::standard_normal(&[64, 4], &mut rng);
        let labels: Vec<usize> = (0..64).map(|i| i % 3).collect();
        let out = g.generate(&z, &labels).unwrap();
        assert_eq!(out.shape(), &[64, 2]);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn generator_rejects_bad_labels() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = Generator::new(&small_cfg(), 3, 2, &mut rng);
        let z = Tensor::zeros(&[1, 4]);
        assert_eq!(
            g.generate(&z, &[3]),
            Err(NetworkError::LabelOutOfRange { label: 3, num_classes: 3 })
        );
    }

    #[test]
    fn zero_final_layer_discriminator_outputs_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = Discriminator::new(&small_cfg(), 3, 2, 64, &mut rng);
        let x = crate::diffusion::standard_normal(&[64, 2], &mut rng);
        let logits = d.discriminate(&x, 10, &[]).unwrap();
        assert_eq!(logits.shape(), &[64, 1]);
        assert!(logits.data().iter().all(|&v| v == 0.0));
        assert!(matches!(
            d.discriminate(&Tensor::zeros(&[2, 3]), 1, &[]),
            Err(NetworkError::InputWidth { expected: 2, got: 3, .. })
        ));
    }

    #[test]
    fn classifier_heads_have_contracted_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = Classifier::new(&small_cfg(), 10, 3, 64, &mut rng);
        let row = vec![0.3, -0.6, 0.9];
        let x = Tensor::from_rows(&[row.clone(), row.clone(), vec![0.0, 0.1, 0.2]]).unwrap();
        let (high, cls) = c.classify(&x, 7).unwrap();
        assert_eq!(high.shape(), &[3, 5]);
        assert_eq!(cls.shape(), &[3, 10]);
        for r in 0..3 {
            let norm: f64 = high.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-10);
        }
        assert_eq!(high.row(0), high.row(1));
        assert_eq!(cls.row(0), cls.row(1));
    }
}
